/** Telemetry line chart as plain SVG: one stream series, a threshold rule,
 * the threshold-crossing marker, and mode-change markers (CC→CV etc.). */

export interface TelemetrySample {
  t: number;
  value: number;
  mode: string;
}

export function parseTelemetryCsv(text: string): TelemetrySample[] {
  const lines = text.trim().split("\n");
  const samples: TelemetrySample[] = [];
  for (const line of lines.slice(1)) {
    const [t, value, mode] = line.split(",");
    samples.push({ t: Number(t), value: Number(value), mode });
  }
  return samples;
}

export interface ChartMarks {
  crossings: number[]; // times where the series rises through the threshold
  modeChanges: { t: number; from: string; to: string }[];
}

export function computeMarks(samples: TelemetrySample[],
                             threshold: number): ChartMarks {
  const crossings: number[] = [];
  const modeChanges: ChartMarks["modeChanges"] = [];
  for (let i = 1; i < samples.length; i++) {
    const prev = samples[i - 1];
    const cur = samples[i];
    if (prev.value <= threshold && cur.value > threshold) {
      const frac = (threshold - prev.value) / (cur.value - prev.value);
      crossings.push(prev.t + (cur.t - prev.t) * frac);
    }
    if (prev.mode !== cur.mode) {
      modeChanges.push({ t: cur.t, from: prev.mode, to: cur.mode });
    }
  }
  return { crossings, modeChanges };
}

export function renderChart(
  doc: Document,
  samples: TelemetrySample[],
  threshold: number,
  width = 640,
  height = 200,
): SVGSVGElement {
  const SVG_NS = "http://www.w3.org/2000/svg";
  const svg = doc.createElementNS(SVG_NS, "svg");
  svg.setAttribute("viewBox", `0 0 ${width} ${height}`);
  svg.setAttribute("class", "telemetry-chart");
  if (!samples.length) return svg;

  const tMax = samples[samples.length - 1].t || 1;
  const vMax = Math.max(threshold, ...samples.map((s) => s.value)) * 1.1;
  const x = (t: number) => (t / tMax) * width;
  const y = (v: number) => height - (v / vMax) * height;

  const line = doc.createElementNS(SVG_NS, "polyline");
  line.setAttribute("class", "series");
  line.setAttribute("fill", "none");
  line.setAttribute(
    "points",
    samples.map((s) => `${x(s.t).toFixed(1)},${y(s.value).toFixed(1)}`).join(" "),
  );
  svg.appendChild(line);

  const rule = doc.createElementNS(SVG_NS, "line");
  rule.setAttribute("class", "threshold");
  rule.setAttribute("x1", "0");
  rule.setAttribute("x2", String(width));
  rule.setAttribute("y1", y(threshold).toFixed(1));
  rule.setAttribute("y2", y(threshold).toFixed(1));
  svg.appendChild(rule);

  const marks = computeMarks(samples, threshold);
  for (const t of marks.crossings) {
    const marker = doc.createElementNS(SVG_NS, "circle");
    marker.setAttribute("class", "crossing-marker");
    marker.setAttribute("cx", x(t).toFixed(1));
    marker.setAttribute("cy", y(threshold).toFixed(1));
    marker.setAttribute("r", "4");
    marker.dataset.t = t.toFixed(2);
    svg.appendChild(marker);
  }
  for (const change of marks.modeChanges) {
    const marker = doc.createElementNS(SVG_NS, "line");
    marker.setAttribute("class", "mode-marker");
    marker.setAttribute("x1", x(change.t).toFixed(1));
    marker.setAttribute("x2", x(change.t).toFixed(1));
    marker.setAttribute("y1", "0");
    marker.setAttribute("y2", String(height));
    marker.dataset.label = `${change.from}→${change.to}`;
    svg.appendChild(marker);
    const text = doc.createElementNS(SVG_NS, "text");
    text.setAttribute("x", (x(change.t) + 4).toFixed(1));
    text.setAttribute("y", "14");
    text.setAttribute("class", "mode-label");
    text.textContent = `${change.from}→${change.to}`;
    svg.appendChild(text);
  }
  return svg;
}
