"""Interactive verification game over a length-prefixed JSON wire protocol.

The trainer serves its Merkle tree; the auditor compares roots and, on a
mismatch, bisects: at each level it fetches both children of the current
disagreeing node and descends into the leftmost child whose digest
differs from its own tree. The walk ends at the first divergent leaf,
for which the auditor assembles authentication paths from both trees. A
judge can check the claim with constant work. A trainer that stops
answering within the timeout fails the audit.

Wire format: 4-byte little-endian length prefix, then a UTF-8 JSON object
with a "type" field. Digests travel as lowercase hex. Tree coordinates
are (level, index) with level 0 the leaves.
"""

from __future__ import annotations

import json
import socket
import struct
from dataclasses import dataclass, field

from .merkle import MerklePath, MerkleTree, node, path, verify_path

PROTOCOL_VERSION = 1
DEFAULT_TIMEOUT = 30.0

TRAINING_VERIFIED = "training_verified"
DISPUTE_AT_LEAF = "dispute_at_leaf"
TRAINER_UNRESPONSIVE = "trainer_unresponsive"
SCHEDULE_MISMATCH = "schedule_mismatch"


class GameProtocolError(RuntimeError):
    """The peer sent something the protocol does not allow."""


def _send(sock: socket.socket, msg: dict) -> bytes:
    data = json.dumps(msg, sort_keys=True, separators=(",", ":")).encode("utf-8")
    sock.sendall(struct.pack("<I", len(data)) + data)
    return data


def _recv_exact(sock: socket.socket, n: int) -> bytes:
    buf = b""
    while len(buf) < n:
        chunk = sock.recv(n - len(buf))
        if not chunk:
            raise ConnectionError("peer closed the connection")
        buf += chunk
    return buf


def _recv(sock: socket.socket) -> dict:
    (length,) = struct.unpack("<I", _recv_exact(sock, 4))
    if length > 1 << 24:
        raise GameProtocolError("oversized message")
    msg = json.loads(_recv_exact(sock, length).decode("utf-8"))
    if not isinstance(msg, dict) or "type" not in msg:
        raise GameProtocolError("message has no type")
    return msg


def _path_to_wire(p: MerklePath) -> dict:
    return {
        "leaf_index": p.leaf_index,
        "leaf": p.leaf.hex(),
        "siblings": [[digest.hex(), side] for digest, side in p.siblings],
    }


def _path_from_wire(obj: dict) -> MerklePath:
    return MerklePath(
        leaf_index=int(obj["leaf_index"]),
        leaf=bytes.fromhex(obj["leaf"]),
        siblings=[(bytes.fromhex(d), side) for d, side in obj["siblings"]],
    )


@dataclass
class VerdictReport:
    outcome: str
    trainer_root: str | None = None
    auditor_root: str | None = None
    leaf_index: int | None = None
    trainer_path: MerklePath | None = None
    auditor_path: MerklePath | None = None
    node_requests: int = 0
    transcript: list = field(default_factory=list)

    def to_json_dict(self) -> dict:
        return {
            "outcome": self.outcome,
            "trainer_root": self.trainer_root,
            "auditor_root": self.auditor_root,
            "leaf_index": self.leaf_index,
            "trainer_path": _path_to_wire(self.trainer_path) if self.trainer_path else None,
            "auditor_path": _path_to_wire(self.auditor_path) if self.auditor_path else None,
            "node_requests": self.node_requests,
            "transcript": self.transcript,
        }


class GameServer:
    """Answers tree queries for one session at a time."""

    def __init__(self, tree: MerkleTree):
        self.tree = tree
        self.last_claim: dict | None = None

    def handle_session(self, conn: socket.socket) -> None:
        try:
            while True:
                try:
                    msg = _recv(conn)
                except (GameProtocolError, json.JSONDecodeError, struct.error):
                    _send(conn, {"type": "refuse", "reason": "malformed message"})
                    return
                except ConnectionError:
                    return
                kind = msg["type"]
                if kind == "hello":
                    _send(conn, {
                        "type": "root_announce",
                        "root": self.tree.root_hex,
                        "leaf_count": len(self.tree.leaves),
                    })
                elif kind == "node_request":
                    try:
                        digest = node(self.tree, int(msg["level"]), int(msg["index"]))
                    except (IndexError, KeyError, TypeError, ValueError):
                        _send(conn, {"type": "refuse", "reason": "node out of range"})
                        continue
                    _send(conn, {
                        "type": "node_response",
                        "level": int(msg["level"]),
                        "index": int(msg["index"]),
                        "digest": digest.hex(),
                    })
                elif kind == "accept":
                    return
                elif kind == "verdict_claim":
                    self.last_claim = msg
                    return
                else:
                    _send(conn, {"type": "refuse", "reason": f"unexpected message {kind!r}"})
                    return
        finally:
            conn.close()

    def serve_forever(self, listener: socket.socket, max_sessions: int | None = None) -> None:
        served = 0
        while max_sessions is None or served < max_sessions:
            conn, _ = listener.accept()
            self.handle_session(conn)
            served += 1


def serve(tree: MerkleTree, address: tuple[str, int], max_sessions: int | None = None) -> None:
    """Bind, listen, and answer sessions sequentially."""
    server = GameServer(tree)
    with socket.socket(socket.AF_INET, socket.SOCK_STREAM) as listener:
        listener.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        listener.bind(address)
        listener.listen(1)
        server.serve_forever(listener, max_sessions=max_sessions)


class _Session:
    """Client-side transport that records a transcript."""

    def __init__(self, sock: socket.socket, transcript: list):
        self.sock = sock
        self.transcript = transcript

    def send(self, msg: dict) -> None:
        _send(self.sock, msg)
        self.transcript.append({"dir": "send", "msg": msg})

    def recv(self) -> dict:
        msg = _recv(self.sock)
        self.transcript.append({"dir": "recv", "msg": msg})
        return msg


def challenge(local_tree: MerkleTree, address: tuple[str, int],
              timeout: float = DEFAULT_TIMEOUT, run_id: str | None = None) -> VerdictReport:
    """Compare against a served tree and localize the first divergent leaf."""
    transcript: list = []
    local_root = local_tree.root_hex
    if run_id is None:
        run_id = local_root[:16]
    report = VerdictReport(outcome=TRAINING_VERIFIED, auditor_root=local_root,
                           transcript=transcript)
    with socket.socket(socket.AF_INET, socket.SOCK_STREAM) as sock:
        sock.settimeout(timeout)
        try:
            sock.connect(address)
            session = _Session(sock, transcript)
            session.send({"type": "hello", "protocol_version": PROTOCOL_VERSION,
                          "run_id": run_id})
            announce = session.recv()
        except (socket.timeout, ConnectionError, OSError):
            report.outcome = TRAINER_UNRESPONSIVE
            return report
        if announce["type"] != "root_announce":
            raise GameProtocolError(f"expected root_announce, got {announce['type']!r}")
        report.trainer_root = announce["root"]
        if int(announce["leaf_count"]) != len(local_tree.leaves):
            report.outcome = SCHEDULE_MISMATCH
            return report
        if announce["root"] == local_root:
            session.send({"type": "accept"})
            return report

        def fetch(level: int, index: int) -> str:
            session.send({"type": "node_request", "level": level, "index": index})
            report.node_requests += 1
            try:
                resp = session.recv()
            except (socket.timeout, ConnectionError, OSError):
                raise TimeoutError
            if resp["type"] != "node_response":
                raise GameProtocolError(f"expected node_response, got {resp['type']!r}")
            return resp["digest"]

        try:
            level = len(local_tree.levels) - 1
            index = 0
            trainer_digest = announce["root"]
            # reversed-order sibling records: (sibling hex or None, side)
            lineage: list[tuple[str | None, str]] = []
            while level > 0:
                child = level - 1
                row = local_tree.levels[child]
                li = 2 * index
                if li + 1 >= len(row):
                    # promoted node: the child digest equals the parent digest
                    lineage.append((None, ""))
                    index = li
                    level = child
                    continue
                left = fetch(child, li)
                right = fetch(child, li + 1)
                if left != row[li].hex():
                    index, trainer_digest = li, left
                    lineage.append((right, "right"))
                else:
                    if right == row[li + 1].hex():
                        raise GameProtocolError(
                            "served children both match locally but parents differ")
                    index, trainer_digest = li + 1, right
                    lineage.append((left, "left"))
                level = child
        except TimeoutError:
            report.outcome = TRAINER_UNRESPONSIVE
            return report

        siblings = [(bytes.fromhex(d), side) for d, side in reversed(lineage) if d is not None]
        trainer_path = MerklePath(leaf_index=index, leaf=bytes.fromhex(trainer_digest),
                                  siblings=siblings)
        auditor_path = path(local_tree, index)
        report.outcome = DISPUTE_AT_LEAF
        report.leaf_index = index
        report.trainer_path = trainer_path
        report.auditor_path = auditor_path
        try:
            session.send({
                "type": "verdict_claim",
                "first_divergent_leaf": index,
                "trainer_path": _path_to_wire(trainer_path),
                "auditor_path": _path_to_wire(auditor_path),
            })
        except OSError:
            pass
        return report


def judge_check(report: VerdictReport, trainer_root: bytes, auditor_root: bytes) -> bool:
    """Accept a dispute claim only if its evidence verifies.

    Constant work: two path verifications plus a digest comparison.
    """
    ok, _ = judge_check_reason(report, trainer_root, auditor_root)
    return ok


def judge_check_reason(report: VerdictReport, trainer_root: bytes,
                       auditor_root: bytes) -> tuple[bool, str]:
    if report.outcome != DISPUTE_AT_LEAF:
        return False, f"no dispute evidence in outcome {report.outcome!r}"
    tp, ap = report.trainer_path, report.auditor_path
    if tp is None or ap is None:
        return False, "missing authentication path"
    if tp.leaf_index != report.leaf_index or ap.leaf_index != report.leaf_index:
        return False, "paths disagree on the disputed leaf index"
    if tp.leaf == ap.leaf:
        return False, "claimed divergent leaves are identical"
    if not verify_path(tp, trainer_root):
        return False, "trainer path does not verify"
    if not verify_path(ap, auditor_root):
        return False, "auditor path does not verify"
    return True, "ok"
