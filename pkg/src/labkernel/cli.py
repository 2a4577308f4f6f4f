"""labctl: operator command line for the gateway (plus local scenario runs).

Network failures exit 7; structured remote errors print the error code and
exit 3; success exits 0.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import requests

EXIT_OK = 0
EXIT_REMOTE = 3
EXIT_NETWORK = 7

DEFAULT_GATEWAY = os.environ.get("LABCTL_GATEWAY", "http://127.0.0.1:8099")
DEFAULT_TOKEN = os.environ.get("LABCTL_TOKEN", "operator-token")


class RemoteFailure(Exception):
    def __init__(self, detail):
        self.detail = detail
        super().__init__(str(detail))


class Client:
    def __init__(self, base: str, token: str) -> None:
        self.base = base.rstrip("/")
        self.headers = {"Authorization": f"Bearer {token}"}

    def _check(self, response: requests.Response):
        if response.status_code >= 400:
            try:
                raise RemoteFailure(response.json().get("detail", response.text))
            except ValueError:
                raise RemoteFailure(response.text) from None
        return response

    def get(self, path: str, **params):
        return self._check(requests.get(self.base + path, headers=self.headers,
                                        params=params or None, timeout=30))

    def post(self, path: str, body: dict):
        return self._check(requests.post(self.base + path, headers=self.headers,
                                         json=body, timeout=30))


def _render_tree(records: list[dict]) -> str:
    by_uuid = {r["uuid"]: r for r in records}
    children: dict[str | None, list[str]] = {}
    for r in records:
        parent = r["parent"] if r["parent"] in by_uuid else None
        children.setdefault(parent, []).append(r["uuid"])
    lines = []

    def walk(uid: str, depth: int) -> None:
        r = by_uuid[uid]
        badge = {"Resource": "R", "Action": "A", "ActionResource": "AR"}[r["kind"]]
        flags = "" if r["schedulable"] else " [archived]"
        volume = r["data"].get("volume_ul")
        vol = f"  {volume} uL" if isinstance(volume, int) else ""
        lines.append(f"{'  ' * depth}{r['name'] or '(unnamed)'} "
                     f"<{badge}>{vol}{flags}")
        for child in children.get(uid, []):
            walk(child, depth + 1)

    for root in children.get(None, []):
        walk(root, 0)
    return "\n".join(lines)


def cmd_tree(client: Client, args) -> int:
    doc = client.get("/resources").json()
    print(_render_tree(doc["records"]))
    print(f"snapshot {doc['snapshot_hash'][:16]}..  "
          f"({len(doc['records'])} records)")
    return EXIT_OK


def cmd_graph(client: Client, args) -> int:
    doc = client.get("/graph").json()
    for edge in doc["edges"]:
        arrow = "->" if edge["directed"] else "--"
        print(f"{edge['edge_id']}: {edge['endpoints'][0][:8]} {arrow} "
              f"{edge['endpoints'][1][:8]} [{edge['medium']}]")
    print(f"{len(doc['edges'])} edges")
    return EXIT_OK


def cmd_compile(client: Client, args) -> int:
    protocol = json.loads(Path(args.protocol).read_text(encoding="utf-8"))
    doc = client.post("/protocols/compile", {"protocol": protocol}).json()
    print(json.dumps(doc, indent=2, sort_keys=True))
    return EXIT_OK


def cmd_submit(client: Client, args) -> int:
    protocol = json.loads(Path(args.protocol).read_text(encoding="utf-8"))
    body = {"protocol": protocol}
    if args.key:
        body["idempotency_key"] = args.key
    doc = client.post("/task-groups", body).json()
    print(doc["group_id"])
    return EXIT_OK


def cmd_approve(client: Client, args) -> int:
    doc = client.post(f"/jobs/{args.job_id}/approve",
                      {"decision": args.decision,
                       "approver": args.approver}).json()
    print(f"{doc['job_id']}: {doc['state']}")
    return EXIT_OK


def cmd_events(client: Client, args) -> int:
    response = requests.get(
        client.base + "/events", headers=client.headers, stream=True,
        params={"since": args.since, "follow": args.follow,
                "timeout": args.timeout}, timeout=args.timeout + 5)
    client._check(response)
    for line in response.iter_lines(decode_unicode=True):
        if line:
            print(line)
    return EXIT_OK


def cmd_status(client: Client, args) -> int:
    doc = client.get(f"/task-groups/{args.group_id}").json()
    print(f"{doc['group_id']}: {doc['status']}")
    for job in doc["jobs"]:
        reason = f" ({job['hold_reason']})" if job.get("hold_reason") else ""
        print(f"  {job['job_id']}: {job['state']}{reason}")
    return EXIT_OK


def cmd_scenario_run(args) -> int:
    from .simlab import run_scenario
    result = run_scenario(args.file)
    print("\n".join(result.summary_lines()))
    if args.log:
        result.write_event_log(args.log)
        print(f"event log written to {args.log}")
    return EXIT_OK if result.passed else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="labctl", description="operator CLI for the lab kernel gateway")
    parser.add_argument("--gateway", default=DEFAULT_GATEWAY)
    parser.add_argument("--token", default=DEFAULT_TOKEN)
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("tree", help="print the resource tree")
    sub.add_parser("graph", help="print the physical graph")

    p = sub.add_parser("compile", help="compile a protocol to a plan")
    p.add_argument("protocol")

    p = sub.add_parser("submit", help="compile and submit a protocol")
    p.add_argument("protocol")
    p.add_argument("--key", help="idempotency key")

    p = sub.add_parser("approve", help="decide an awaiting job")
    p.add_argument("job_id")
    p.add_argument("--decision", choices=("approve", "reject"),
                   default="approve")
    p.add_argument("--approver", default="operator")

    p = sub.add_parser("events", help="stream the event journal")
    p.add_argument("--since", type=int, default=0)
    p.add_argument("--follow", action="store_true")
    p.add_argument("--timeout", type=float, default=10.0)

    p = sub.add_parser("status", help="task group status")
    p.add_argument("group_id")

    p = sub.add_parser("scenario", help="local scenario tools")
    scenario_sub = p.add_subparsers(dest="scenario_command", required=True)
    run_p = scenario_sub.add_parser("run", help="run a scenario locally")
    run_p.add_argument("file")
    run_p.add_argument("--log", help="write the .crutd.log here")

    return parser


COMMANDS = {
    "tree": cmd_tree,
    "graph": cmd_graph,
    "compile": cmd_compile,
    "submit": cmd_submit,
    "approve": cmd_approve,
    "events": cmd_events,
    "status": cmd_status,
}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "scenario":
        return cmd_scenario_run(args)
    client = Client(args.gateway, args.token)
    try:
        return COMMANDS[args.command](client, args)
    except RemoteFailure as exc:
        detail = exc.detail
        if isinstance(detail, dict):
            print(f"error: {detail.get('code', 'error')}: "
                  f"{detail.get('message', detail)}", file=sys.stderr)
        else:
            print(f"error: {detail}", file=sys.stderr)
        return EXIT_REMOTE
    except requests.RequestException as exc:
        print(f"network error: {exc}", file=sys.stderr)
        return EXIT_NETWORK


if __name__ == "__main__":
    raise SystemExit(main())
