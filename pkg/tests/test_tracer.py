"""Tracer tests: decoding, silent-SMS pairing, rewrite rules."""

import io
import random

import pytest

from simlink import tlv
from simlink.apdu import (
    CommandApdu,
    INS_FETCH,
    INS_READ_BINARY,
    INS_SELECT,
    INS_STATUS,
    INS_TERMINAL_RESPONSE,
    ResponseApdu,
)
from simlink.tlv import ProactiveKind
from simlink.tracer import (
    DIR_MODEM_TO_SIM,
    DIR_SIM_TO_MODEM,
    FLAG_SILENT_SMS,
    RewriteRule,
    Rewriter,
    TraceEvent,
    Tracer,
    apply_rewrites,
    decode_event,
    detect_silent_sms,
    read_trace,
    rules_from_json,
)
from simlink.vsim import Card, ProactiveQueue, demo_profile

FETCH = CommandApdu(0x80, INS_FETCH, 0x00, 0x00, le=256)


def proactive_response(kind, number_payload=b""):
    queue = ProactiveQueue()
    cmd = queue.enqueue(kind, number_payload)
    return ResponseApdu(cmd.to_bytes(), 0x90, 0x00), cmd.command_number


class TestDecodeEvent:
    def test_select_maps_file_id(self):
        cmd = CommandApdu(0xA0, INS_SELECT, 0x00, 0x00, data=b"\x3F\x00")
        assert decode_event(cmd) == {"ins_name": "SELECT", "file_id": "3F00"}

    def test_select_by_aid(self):
        cmd = CommandApdu(0x00, INS_SELECT, 0x04, 0x04, data=b"\xA0\x00\x00")
        assert decode_event(cmd)["aid"] == "A00000"

    def test_unknown_ins_yields_unknown(self):
        cmd = CommandApdu(0x00, 0xEE, 0x01, 0x02, data=b"\xDE\xAD")
        assert decode_event(cmd)["ins_name"] == "UNKNOWN"

    def test_fetch_response_extracts_proactive_type(self):
        resp, number = proactive_response(ProactiveKind.SEND_SHORT_MESSAGE)
        decoded = decode_event(resp, context=FETCH)
        assert decoded["proactive_type"] == "SEND_SHORT_MESSAGE"
        assert decoded["proactive_number"] == number

    def test_bare_tlv_stream_also_decodes(self):
        # Command-details TLV without the 0xD0 envelope still yields the type.
        resp = ResponseApdu(bytes.fromhex("8103011300"), 0x90, 0x00)
        decoded = decode_event(resp, context=FETCH)
        assert decoded["proactive_type"] == "SEND_SHORT_MESSAGE"

    def test_garbage_fetch_body_is_tolerated(self):
        resp = ResponseApdu(b"\xFF\x00\x01", 0x90, 0x00)
        decoded = decode_event(resp, context=FETCH)
        assert "proactive_type" not in decoded
        assert decoded["status_class"] == "ok"

    def test_status_class_names(self):
        resp = ResponseApdu(b"", 0x91, 0x0C)
        assert decode_event(resp, context=FETCH)["status_class"] == "proactive_pending"


class TestTracerPersistence:
    def test_jsonl_roundtrip_and_schema(self):
        sink = io.StringIO()
        tracer = Tracer(session_id=5, sink=sink)
        cmd = CommandApdu(0x00, INS_READ_BINARY, 0, 0, le=10)
        tracer.command(10, cmd)
        tracer.response(12, ResponseApdu(b"\x98\x10", 0x90, 0x00), command=cmd)
        lines = sink.getvalue().splitlines()
        assert len(lines) == 2
        events = read_trace(lines)
        assert events[0].direction == DIR_MODEM_TO_SIM
        assert events[0].raw_hex == "00B000000A"
        assert events[1].raw_hex == "98109000"
        assert events[1].decoded["ins_name"] == "READ BINARY"
        import json
        doc = json.loads(lines[0])
        assert set(doc) == {"ts_ms", "dir", "raw_hex", "decoded", "session", "flags"}

    def test_replay_decodes_identically(self):
        sink = io.StringIO()
        tracer = Tracer(session_id=1, sink=sink)
        cmd = CommandApdu(0x00, INS_SELECT, 0x00, 0x04, data=b"\x2F\xE2")
        tracer.command(0, cmd)
        tracer.response(1, ResponseApdu(b"", 0x90, 0x00), command=cmd)
        replayed = read_trace(sink.getvalue().splitlines())
        assert [e.decoded for e in replayed] == [e.decoded for e in tracer.events]

    def test_lossless_capture_redecodes_from_raw(self):
        # Running the decoder over a persisted session's raw octets must
        # reproduce the stored summaries exactly (rewrite attribution is
        # relay metadata, not decoder output).
        from simlink.apdu import decode_command
        card = Card(demo_profile(), proactive_trigger_polls=1)
        card.reset()
        tracer = Tracer(session_id=4)
        drive_proactive(card, tracer, ack_numbers={1})
        last_cmd = None
        for event in tracer.events:
            raw = bytes.fromhex(event.raw_hex)
            if event.direction == DIR_MODEM_TO_SIM:
                last_cmd = decode_command(raw)
                assert decode_event(last_cmd) == event.decoded
            else:
                resp = ResponseApdu.from_bytes(raw)
                stored = {k: v for k, v in event.decoded.items()
                          if k not in ("rule_id", "original_hex")}
                assert decode_event(resp, context=last_cmd) == stored


def trace_card_session(card, commands, tracer):
    ts = 0
    for cmd in commands:
        tracer.command(ts, cmd)
        resp = card.process(cmd)
        tracer.response(ts + 1, resp, command=cmd)
        ts += 2
    return tracer.events


def drive_proactive(card, tracer, ack_numbers):
    """Poll, fetch everything pending, acknowledge only chosen numbers."""
    ts = 1000
    status = CommandApdu(0x00, INS_STATUS, 0, 0)
    tracer.command(ts, status)
    resp = card.process(status)
    tracer.response(ts + 1, resp, command=status)
    while resp.sw1 == 0x91:
        fetch = CommandApdu(0x80, INS_FETCH, 0, 0, le=resp.sw2)
        tracer.command(ts + 2, fetch)
        fetched = card.process(fetch)
        tracer.response(ts + 3, fetched, command=fetch)
        info = tlv.parse_proactive(fetched.data)
        resp = fetched
        if info.command_number in ack_numbers:
            body = tlv.encode_tlv(
                tlv.TAG_COMMAND_DETAILS,
                bytes([info.command_number, info.type_octet, 0x00]),
            ) + tlv.encode_tlv(tlv.TAG_RESULT, b"\x00")
            tr = CommandApdu(0x80, INS_TERMINAL_RESPONSE, 0, 0, data=body)
            tracer.command(ts + 4, tr)
            resp = card.process(tr)
            tracer.response(ts + 5, resp, command=tr)
        ts += 6


def oracle_pairing(events):
    """Brute-force oracle over (FETCH, TERMINAL RESPONSE) command numbers."""
    flagged = set()
    for i, ev in enumerate(events):
        if ev.direction != "s2m" or ev.decoded.get("proactive_type") != "SEND_SHORT_MESSAGE":
            continue
        n = ev.decoded.get("proactive_number")
        for later in events[i + 1:]:
            if (
                later.direction == "m2s"
                and later.decoded.get("ins_name") == "TERMINAL RESPONSE"
                and later.decoded.get("proactive_number") == n
            ):
                flagged.add(i)
                break
    return flagged


class TestDetectSilentSms:
    def test_demo_profile_flags_exactly_one(self):
        card = Card(demo_profile(), proactive_trigger_polls=1)
        card.reset()
        tracer = Tracer(session_id=1)
        drive_proactive(card, tracer, ack_numbers={1})
        flagged = detect_silent_sms(tracer.events)
        assert len(flagged) == 1
        assert FLAG_SILENT_SMS in flagged[0].flags

    def test_status_only_session_has_zero_flags(self):
        card = Card(demo_profile(), proactive_trigger_polls=99)
        card.reset()
        tracer = Tracer(session_id=1)
        commands = [CommandApdu(0x00, INS_STATUS, 0, 0)] * 5
        trace_card_session(card, commands, tracer)
        assert detect_silent_sms(tracer.events) == []

    def test_unacknowledged_sms_not_flagged(self):
        profile = demo_profile()
        profile.proactive = profile.proactive * 2  # two scripted silent SMS
        card = Card(profile, proactive_trigger_polls=1)
        card.reset()
        tracer = Tracer(session_id=1)
        drive_proactive(card, tracer, ack_numbers={2})  # ack only the second
        flagged = detect_silent_sms(tracer.events)
        assert len(flagged) == 1
        assert flagged[0].decoded["proactive_number"] == 2
        assert oracle_pairing(tracer.events) == {
            tracer.events.index(flagged[0])
        }

    def test_matches_bruteforce_oracle_on_random_streams(self):
        rng = random.Random(0xDE7EC7)
        for _ in range(50):
            events = []
            for i in range(rng.randint(2, 20)):
                if rng.random() < 0.5:
                    n = rng.randint(1, 3)
                    events.append(TraceEvent(
                        ts_ms=i, direction="s2m", raw_hex="",
                        decoded={"ins_name": "FETCH",
                                 "proactive_type": "SEND_SHORT_MESSAGE",
                                 "proactive_number": n},
                        session_id=1))
                else:
                    n = rng.randint(1, 3)
                    events.append(TraceEvent(
                        ts_ms=i, direction="m2s", raw_hex="",
                        decoded={"ins_name": "TERMINAL RESPONSE",
                                 "proactive_number": n},
                        session_id=1))
            flagged = detect_silent_sms(events)
            assert {events.index(e) for e in flagged} == oracle_pairing(events)


ICCID_RULE_JSON = """
[
  {"rule_id": "iccid-swap",
   "on": "response",
   "match": {"data_prefix": "9810"},
   "action": {"kind": "replace_response_data",
              "data_hex": "98103254769810325476"}}
]
"""


class TestRewrites:
    def test_rules_json_parsing(self):
        rules = rules_from_json(ICCID_RULE_JSON)
        assert rules[0].rule_id == "iccid-swap"
        assert rules[0].on == "response"
        assert rules[0].match["data_prefix"] == b"\x98\x10"

    def test_infer_target_from_fields(self):
        rules = rules_from_json(
            '[{"rule_id": "r1", "match": {"ins": 176},'
            ' "action": {"kind": "pass_through"}},'
            ' {"rule_id": "r2", "match": {"sw1": 144},'
            ' "action": {"kind": "pass_through"}}]'
        )
        assert rules[0].on == "command" and rules[1].on == "response"

    def test_ambiguous_rule_rejected(self):
        with pytest.raises(ValueError):
            rules_from_json(
                '[{"rule_id": "r", "match": {"data_prefix": "AA"},'
                ' "action": {"kind": "drop"}}]'
            )

    def test_empty_rule_list_is_identity(self):
        resp = ResponseApdu(b"\x98\x10", 0x90, 0x00)
        assert apply_rewrites([], resp) == (resp, None)

    def test_replace_response_data(self):
        rules = rules_from_json(ICCID_RULE_JSON)
        resp = ResponseApdu(bytes.fromhex("981032547698103254F5"), 0x90, 0x00)
        new, rule_id = apply_rewrites(rules, resp)
        assert rule_id == "iccid-swap"
        assert new.data == bytes.fromhex("98103254769810325476")
        assert (new.sw1, new.sw2) == (0x90, 0x00)

    def test_first_match_wins(self):
        rules = [
            RewriteRule("first", "response", {"sw1": 0x90}, "replace_status",
                        sw=(0x6A, 0x82)),
            RewriteRule("second", "response", {"sw1": 0x90}, "replace_status",
                        sw=(0x6F, 0x00)),
        ]
        resp = ResponseApdu(b"", 0x90, 0x00)
        new, rule_id = apply_rewrites(rules, resp)
        assert rule_id == "first" and (new.sw1, new.sw2) == (0x6A, 0x82)

    def test_unmatched_passes_unmodified(self):
        rules = rules_from_json(ICCID_RULE_JSON)
        resp = ResponseApdu(b"\x01\x02", 0x90, 0x00)
        assert apply_rewrites(rules, resp) == (resp, None)

    def test_drop_synthesizes_6d00_and_skips_card(self):
        calls = []

        def respond(cmd):
            calls.append(cmd)
            return ResponseApdu(b"", 0x90, 0x00)

        rewriter = Rewriter([
            RewriteRule("no-status", "command", {"ins": INS_STATUS}, "drop")
        ])
        outcome = rewriter.process(CommandApdu(0x00, INS_STATUS, 0, 0), respond)
        assert outcome.dropped
        assert (outcome.response.sw1, outcome.response.sw2) == (0x6D, 0x00)
        assert calls == []  # the card never saw the command

    def test_command_rule_rewrites_its_response(self):
        rewriter = Rewriter([
            RewriteRule("blank-read", "command", {"ins": INS_READ_BINARY},
                        "replace_response_data", data=b"\x00" * 4)
        ])
        outcome = rewriter.process(
            CommandApdu(0x00, INS_READ_BINARY, 0, 0, le=4),
            lambda cmd: ResponseApdu(b"\xAA\xBB\xCC\xDD", 0x90, 0x00),
        )
        assert outcome.response.data == b"\x00\x00\x00\x00"
        assert outcome.original.data == b"\xAA\xBB\xCC\xDD"
        assert outcome.rule_id == "blank-read"

    def test_pass_through_is_identity_with_attribution(self):
        rewriter = Rewriter([
            RewriteRule("skip", "command", {"ins": INS_STATUS}, "pass_through"),
            RewriteRule("maul", "response", {"sw1": 0x90}, "replace_status",
                        sw=(0x6F, 0x00)),
        ])
        outcome = rewriter.process(
            CommandApdu(0x00, INS_STATUS, 0, 0),
            lambda cmd: ResponseApdu(b"", 0x90, 0x00),
        )
        assert outcome.response.sw == 0x9000
        assert outcome.rule_id == "skip" and outcome.original is None

    def test_any_rule_set_keeps_alternation(self):
        # Property: whatever the rules, one command in yields exactly one
        # response out, so the modem-facing side never starves or floods.
        rng = random.Random(0xA17)
        actions = ["replace_response_data", "replace_status", "drop",
                   "pass_through"]
        for _ in range(40):
            rules = []
            for i in range(rng.randint(0, 5)):
                on = rng.choice(["command", "response"])
                match = ({"ins": rng.randrange(256)} if on == "command"
                         else {"sw1": rng.choice([0x90, 0x91, 0x6A])})
                action = rng.choice(actions)
                rules.append(RewriteRule(
                    f"r{i}", on, match, action,
                    data=bytes(rng.randrange(256) for _ in range(4)),
                    sw=(0x6F, 0x00) if action == "replace_status" else None,
                ))
            rewriter = Rewriter(rules)
            card = Card(demo_profile(), proactive_trigger_polls=99)
            card.reset()
            for _ in range(10):
                cmd = CommandApdu(0x00, rng.choice([0xA4, 0xB0, 0xF2, 0xEE]),
                                  0x00, 0x00)
                outcome = rewriter.process(cmd, card.process)
                assert isinstance(outcome.response, ResponseApdu)

    def test_rewritten_event_carries_flag_and_original(self):
        tracer = Tracer(session_id=9)
        cmd = CommandApdu(0x00, INS_READ_BINARY, 0, 0, le=2)
        original = ResponseApdu(b"\x98\x10", 0x90, 0x00)
        new = ResponseApdu(b"\x00\x00", 0x90, 0x00)
        event = tracer.response(5, new, command=cmd, rule_id="iccid-swap",
                                original=original)
        assert "rewritten" in event.flags
        assert event.raw_hex == "00009000"
        assert event.decoded["original_hex"] == "98109000"
        assert event.decoded["rule_id"] == "iccid-swap"
