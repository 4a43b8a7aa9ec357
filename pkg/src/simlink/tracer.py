"""Inspect, decode, rewrite, and persist the relayed command stream.

Trace files are JSON Lines, one event per line, flushed per event so a
crash never loses acknowledged traffic. The schema is stable:

    {"ts_ms": int, "dir": "m2s"|"s2m", "raw_hex": str,
     "decoded": {...}, "session": int, "flags": [str]}

``raw_hex`` holds the relayed octets: for modem-to-sim events the bytes
as the modem sent them (before any rewriting), for sim-to-modem events
the bytes as the modem will see them (after rewriting). When a rewrite
changed the octets, the original is preserved in ``decoded.original_hex``
next to the matched ``rule_id``, so both endpoint views stay
reconstructible from one file.

One tracer serves one session and its sink is exclusive to it.
"""

from __future__ import annotations

import json
import logging
import os
from dataclasses import dataclass, field
from typing import IO, Iterable, List, Optional, Tuple, Union

from . import tlv
from .apdu import (
    CommandApdu,
    INS_FETCH,
    INS_SELECT,
    INS_TERMINAL_RESPONSE,
    ResponseApdu,
    classify_status,
    encode_command,
    ins_name,
)

logger = logging.getLogger(__name__)

DIR_MODEM_TO_SIM = "m2s"
DIR_SIM_TO_MODEM = "s2m"

FLAG_SILENT_SMS = "silent_sms"
FLAG_REWRITTEN = "rewritten"


@dataclass
class TraceEvent:
    ts_ms: int
    direction: str
    raw_hex: str
    decoded: dict
    session_id: int
    flags: List[str] = field(default_factory=list)

    def to_json(self) -> str:
        return json.dumps(
            {
                "ts_ms": self.ts_ms,
                "dir": self.direction,
                "raw_hex": self.raw_hex,
                "decoded": self.decoded,
                "session": self.session_id,
                "flags": self.flags,
            },
            separators=(",", ":"),
        )

    @classmethod
    def from_json(cls, line: str) -> "TraceEvent":
        doc = json.loads(line)
        return cls(
            ts_ms=doc["ts_ms"],
            direction=doc["dir"],
            raw_hex=doc["raw_hex"],
            decoded=doc.get("decoded", {}),
            session_id=doc["session"],
            flags=list(doc.get("flags", [])),
        )


# ---------------------------------------------------------------------------
# Decoding
# ---------------------------------------------------------------------------


def decode_event(item: Union[CommandApdu, ResponseApdu],
                 context: Optional[CommandApdu] = None) -> dict:
    """Summarize one relayed value for the trace.

    ``context`` is the command a response answers; it selects response
    decoding (status class, FETCH proactive envelope). Undecodable bodies
    never fail: they come back as UNKNOWN with the raw octets preserved
    by the caller.
    """
    if isinstance(item, CommandApdu):
        return _decode_command(item)
    return _decode_response(item, context)


def _decode_command(cmd: CommandApdu) -> dict:
    decoded = {"ins_name": ins_name(cmd.ins)}
    if cmd.ins == INS_SELECT:
        if cmd.p1 == 0x04 and cmd.data:
            decoded["aid"] = cmd.data.hex().upper()
        elif len(cmd.data) == 2:
            decoded["file_id"] = cmd.data.hex().upper()
    elif cmd.ins == INS_TERMINAL_RESPONSE:
        info = tlv.parse_terminal_response(cmd.data)
        if info is not None:
            decoded["proactive_number"] = info.command_number
            decoded["proactive_type"] = info.type_name
    return decoded


def _decode_response(resp: ResponseApdu,
                     command: Optional[CommandApdu]) -> dict:
    decoded = {"ins_name": ins_name(command.ins) if command else "UNKNOWN"}
    decoded["status_class"] = classify_status(resp.sw1, resp.sw2).kind.value
    if command is not None and command.ins == INS_FETCH and resp.data:
        info = tlv.parse_proactive(resp.data) or tlv.parse_terminal_response(resp.data)
        if info is not None:
            decoded["proactive_type"] = info.type_name
            decoded["proactive_number"] = info.command_number
    return decoded


# ---------------------------------------------------------------------------
# Rewrite rules
# ---------------------------------------------------------------------------

ACTION_REPLACE_RESPONSE_DATA = "replace_response_data"
ACTION_REPLACE_STATUS = "replace_status"
ACTION_DROP = "drop"
ACTION_PASS_THROUGH = "pass_through"

_COMMAND_MATCH_FIELDS = {"cla", "ins", "p1", "p2"}
_RESPONSE_MATCH_FIELDS = {"sw1", "sw2"}

# Drop synthesizes this toward the modem so alternation survives.
DROP_STATUS = (0x6D, 0x00)


@dataclass(frozen=True)
class RewriteRule:
    """One match/action pair; rules apply in list order, first match wins."""

    rule_id: str
    on: str  # "command" | "response"
    match: dict
    action: str
    data: bytes = b""
    sw: Optional[Tuple[int, int]] = None

    def __post_init__(self):
        if self.on not in ("command", "response"):
            raise ValueError(f"rule {self.rule_id}: bad target {self.on!r}")
        if self.action not in (ACTION_REPLACE_RESPONSE_DATA, ACTION_REPLACE_STATUS,
                               ACTION_DROP, ACTION_PASS_THROUGH):
            raise ValueError(f"rule {self.rule_id}: bad action {self.action!r}")
        if self.action == ACTION_REPLACE_STATUS and self.sw is None:
            raise ValueError(f"rule {self.rule_id}: replace_status needs sw1/sw2")

    def matches_command(self, cmd: CommandApdu) -> bool:
        if self.on != "command":
            return False
        m = self.match
        for name in ("cla", "ins", "p1", "p2"):
            if name in m and getattr(cmd, name) != m[name]:
                return False
        prefix = m.get("data_prefix", b"")
        return cmd.data.startswith(prefix)

    def matches_response(self, resp: ResponseApdu) -> bool:
        if self.on != "response":
            return False
        m = self.match
        if "sw1" in m and resp.sw1 != m["sw1"]:
            return False
        if "sw2" in m and resp.sw2 != m["sw2"]:
            return False
        prefix = m.get("data_prefix", b"")
        return resp.data.startswith(prefix)

    def apply_to_response(self, resp: ResponseApdu) -> ResponseApdu:
        if self.action == ACTION_REPLACE_RESPONSE_DATA:
            return ResponseApdu(self.data, resp.sw1, resp.sw2)
        if self.action == ACTION_REPLACE_STATUS:
            return ResponseApdu(resp.data, *self.sw)
        if self.action == ACTION_DROP:
            return ResponseApdu(b"", *DROP_STATUS)
        return resp


def rule_from_dict(doc: dict) -> RewriteRule:
    match = dict(doc.get("match", {}))
    on = doc.get("on")
    if on is None:
        # Infer the target from the fields present; a bare data_prefix is
        # ambiguous and must say which side it means.
        if match.keys() & _COMMAND_MATCH_FIELDS:
            on = "command"
        elif match.keys() & _RESPONSE_MATCH_FIELDS:
            on = "response"
        else:
            raise ValueError(
                f"rule {doc.get('rule_id')!r}: cannot infer target, add \"on\""
            )
    if "data_prefix" in match:
        match["data_prefix"] = bytes.fromhex(match["data_prefix"])
    action = doc["action"]
    kind = action["kind"]
    data = bytes.fromhex(action.get("data_hex", ""))
    sw = None
    if kind == ACTION_REPLACE_STATUS:
        sw = (action["sw1"], action["sw2"])
    return RewriteRule(
        rule_id=doc["rule_id"], on=on, match=match, action=kind, data=data, sw=sw
    )


def rules_from_json(text: str) -> List[RewriteRule]:
    return [rule_from_dict(doc) for doc in json.loads(text)]


def apply_rewrites(
    rules: List[RewriteRule], item: Union[CommandApdu, ResponseApdu]
) -> Tuple[Union[CommandApdu, ResponseApdu], Optional[str]]:
    """First matching rule wins; unmatched values pass unmodified.

    Commands are never content-modified (a matching drop rule is acted on
    by the relay, which synthesizes the drop status toward the modem);
    the matched rule id is still reported for attribution.
    """
    if isinstance(item, CommandApdu):
        for rule in rules:
            if rule.matches_command(item):
                return item, rule.rule_id
        return item, None
    for rule in rules:
        if rule.matches_response(item):
            return rule.apply_to_response(item), rule.rule_id
    return item, None


@dataclass(frozen=True)
class RewriteOutcome:
    response: ResponseApdu
    rule_id: Optional[str] = None
    original: Optional[ResponseApdu] = None  # set only when octets changed
    dropped: bool = False


class Rewriter:
    """Relay-side engine: command rules are consulted before the card runs
    (a drop must keep the card out of the loop), then response rules."""

    def __init__(self, rules: Optional[List[RewriteRule]] = None):
        self.rules = list(rules or [])

    def process(self, cmd: CommandApdu, respond) -> RewriteOutcome:
        """Run one exchange through the rules; ``respond`` asks the card."""
        cmd_rule = next((r for r in self.rules if r.matches_command(cmd)), None)
        if cmd_rule is not None:
            if cmd_rule.action == ACTION_DROP:
                return RewriteOutcome(
                    ResponseApdu(b"", *DROP_STATUS), cmd_rule.rule_id, dropped=True
                )
            resp = respond(cmd)
            if cmd_rule.action == ACTION_PASS_THROUGH:
                return RewriteOutcome(resp, cmd_rule.rule_id)
            new = cmd_rule.apply_to_response(resp)
            return RewriteOutcome(
                new, cmd_rule.rule_id, original=resp if new != resp else None
            )
        resp = respond(cmd)
        resp_rule = next((r for r in self.rules if r.matches_response(resp)), None)
        if resp_rule is None:
            return RewriteOutcome(resp)
        new = resp_rule.apply_to_response(resp)
        return RewriteOutcome(
            new, resp_rule.rule_id, original=resp if new != resp else None
        )


# ---------------------------------------------------------------------------
# Tracer
# ---------------------------------------------------------------------------


class Tracer:
    """Collects one session's events, optionally mirroring them to a sink."""

    def __init__(self, session_id: int, sink: Optional[IO[str]] = None):
        self.session_id = session_id
        self.sink = sink
        self.events: List[TraceEvent] = []

    def _record(self, event: TraceEvent) -> TraceEvent:
        self.events.append(event)
        if self.sink is not None:
            self.sink.write(event.to_json() + "\n")
            self.sink.flush()
        return event

    def command(self, ts_ms: float, cmd: CommandApdu) -> TraceEvent:
        return self._record(
            TraceEvent(
                ts_ms=int(ts_ms),
                direction=DIR_MODEM_TO_SIM,
                raw_hex=encode_command(cmd).hex().upper(),
                decoded=decode_event(cmd),
                session_id=self.session_id,
            )
        )

    def response(
        self,
        ts_ms: float,
        resp: ResponseApdu,
        command: Optional[CommandApdu] = None,
        rule_id: Optional[str] = None,
        original: Optional[ResponseApdu] = None,
    ) -> TraceEvent:
        decoded = decode_event(resp, command)
        flags = []
        if rule_id is not None:
            decoded["rule_id"] = rule_id
            flags.append(FLAG_REWRITTEN)
            if original is not None:
                decoded["original_hex"] = original.to_bytes().hex().upper()
        return self._record(
            TraceEvent(
                ts_ms=int(ts_ms),
                direction=DIR_SIM_TO_MODEM,
                raw_hex=resp.to_bytes().hex().upper(),
                decoded=decoded,
                session_id=self.session_id,
                flags=flags,
            )
        )


def read_trace(lines: Iterable[str]) -> List[TraceEvent]:
    return [TraceEvent.from_json(line) for line in lines if line.strip()]


def write_trace(path: str, events: List[TraceEvent]):
    """Rewrite a trace file in one atomic replace.

    Used to annotate a completed session's stream (e.g. silent-SMS flags,
    which need the whole session to pair up); the per-event flushed file
    stays intact until the replacement is fully written.
    """
    tmp = path + ".tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        for event in events:
            fh.write(event.to_json() + "\n")
    os.replace(tmp, path)


def detect_silent_sms(events: List[TraceEvent]) -> List[TraceEvent]:
    """Flag fetched SEND SHORT MESSAGE commands the terminal acknowledged.

    A FETCH response event qualifies iff a later modem-to-sim TERMINAL
    RESPONSE carries the same proactive command number. Qualifying events
    get the silent_sms flag added and are returned in stream order.
    """
    flagged = []
    for idx, event in enumerate(events):
        if event.direction != DIR_SIM_TO_MODEM:
            continue
        decoded = event.decoded
        if decoded.get("proactive_type") != "SEND_SHORT_MESSAGE":
            continue
        number = decoded.get("proactive_number")
        if number is None:
            continue
        acked = any(
            later.direction == DIR_MODEM_TO_SIM
            and later.decoded.get("ins_name") == "TERMINAL RESPONSE"
            and later.decoded.get("proactive_number") == number
            for later in events[idx + 1:]
        )
        if acked:
            if FLAG_SILENT_SMS not in event.flags:
                event.flags.append(FLAG_SILENT_SMS)
            flagged.append(event)
    return flagged
