"""A virtual modem that drives a full SIM session over any link.

The modem owns the T=0 work-waiting budget: if no procedure byte or
status arrives within ``waiting_time_ms`` of the previous NULL or
transfer, the session aborts with TimeoutExpired. Links report the
observable event times of each exchange in a :class:`Timing`, which the
modem also replays through the procedure-byte machine, exactly as the
front-end would feed a hardware modem.
"""

from __future__ import annotations

import json
import logging
import random
from dataclasses import dataclass, field
from typing import List, Optional, Tuple

from . import tlv
from .apdu import (
    CommandApdu,
    INS_AUTHENTICATE,
    INS_FETCH,
    INS_READ_BINARY,
    INS_SELECT,
    INS_STATUS,
    INS_TERMINAL_RESPONSE,
    ProcedureState,
    ResponseApdu,
    StatusKind,
    StepKind,
    classify_status,
)
from .errors import AuthFailed, TimeoutExpired
from .tracer import Tracer
from .vsim import USIM_AID, decode_iccid, decode_imsi, verify_aka_response

logger = logging.getLogger(__name__)

DEFAULT_WAITING_TIME_MS = 300.0

PHASE_RESET = "reset"
PHASE_READ_ICCID = "read_iccid"
PHASE_SELECT_USIM = "select_usim"
PHASE_READ_IMSI = "read_imsi"
PHASE_AUTHENTICATE = "authenticate"
PHASE_STATUS_POLL = "status_poll"
PHASE_PROACTIVE_FETCH = "proactive_fetch"

EF_ICCID = b"\x2F\xE2"
EF_IMSI = b"\x6F\x07"


@dataclass(frozen=True)
class Timing:
    """Observable arrivals for one exchange, in link-clock milliseconds."""

    start_ms: float
    nulls: Tuple[float, ...] = ()
    done_ms: float = 0.0

    def events(self) -> List[float]:
        return [self.start_ms, *self.nulls, self.done_ms]


@dataclass(frozen=True)
class Phase:
    name: str
    count: int = 1
    period_ms: float = 0.0


def default_script() -> List[Phase]:
    return [
        Phase(PHASE_RESET),
        Phase(PHASE_READ_ICCID),
        Phase(PHASE_SELECT_USIM),
        Phase(PHASE_READ_IMSI),
        Phase(PHASE_AUTHENTICATE, count=2),
        Phase(PHASE_STATUS_POLL, count=4),
        Phase(PHASE_PROACTIVE_FETCH),
    ]


def script_from_json(text: str) -> dict:
    """Parse a script file: phases plus optional modem settings.

    Schema: {"phases": [{"name": ..., "count"?, "period_ms"?}, ...],
    "waiting_time_ms"?, "seed"?, "verify"?: {"k_hex", "op_salt_hex"}}
    """
    doc = json.loads(text)
    out = dict(doc)
    if "phases" in doc:
        out["phases"] = [
            Phase(p["name"], count=int(p.get("count", 1)),
                  period_ms=float(p.get("period_ms", 0.0)))
            for p in doc["phases"]
        ]
    return out


@dataclass
class SessionReport:
    completed_phases: List[str] = field(default_factory=list)
    aka_ok: Optional[bool] = None
    elapsed_ms: float = 0.0
    failure: Optional[str] = None
    iccid: Optional[str] = None
    imsi: Optional[str] = None
    exchanges: int = 0

    @property
    def completed(self) -> bool:
        return self.failure is None

    def to_dict(self) -> dict:
        return {
            "completed_phases": self.completed_phases,
            "aka_ok": self.aka_ok,
            "elapsed_ms": round(self.elapsed_ms, 3),
            "failure": self.failure,
            "iccid": self.iccid,
            "imsi": self.imsi,
            "exchanges": self.exchanges,
        }


class ModemSim:
    """Scripted modem: runs its phases in order against a link.

    A link provides ``reset() -> (atr_bytes, Timing)``,
    ``exchange(cmd) -> (ResponseApdu, Timing)``, and optionally
    ``idle(ms)`` for inter-poll pauses.
    """

    def __init__(
        self,
        script: Optional[List[Phase]] = None,
        waiting_time_ms: float = DEFAULT_WAITING_TIME_MS,
        verify_aka: bool = False,
        k: Optional[bytes] = None,
        op_salt: Optional[bytes] = None,
        seed: int = 0,
    ):
        self.script = list(script) if script is not None else default_script()
        self.waiting_time_ms = waiting_time_ms
        self.verify_aka = verify_aka
        self.k = k
        self.op_salt = op_salt
        self.seed = seed
        if verify_aka and (k is None or op_salt is None):
            raise ValueError("verify_aka needs k and op_salt")

    # -- public -----------------------------------------------------------

    def run(self, link, tracer: Optional[Tracer] = None) -> SessionReport:
        runner = _SessionRun(self, link, tracer)
        return runner.run()


class _SessionRun:
    """State for one session execution."""

    def __init__(self, modem: ModemSim, link, tracer: Optional[Tracer]):
        self.m = modem
        self.link = link
        self.tracer = tracer
        self.rng = random.Random(modem.seed)
        self.report = SessionReport()
        self.t0: Optional[float] = None
        self.last_event: float = 0.0
        self.pending_proactive: Optional[int] = None
        self.last_sqn: Optional[int] = None
        self.aka_rounds: List[bool] = []
        self.phase_name = PHASE_RESET

    def run(self) -> SessionReport:
        handlers = {
            PHASE_RESET: self._phase_reset,
            PHASE_READ_ICCID: self._phase_read_iccid,
            PHASE_SELECT_USIM: self._phase_select_usim,
            PHASE_READ_IMSI: self._phase_read_imsi,
            PHASE_AUTHENTICATE: self._phase_authenticate,
            PHASE_STATUS_POLL: self._phase_status_poll,
            PHASE_PROACTIVE_FETCH: self._phase_proactive_fetch,
        }
        try:
            for phase in self.m.script:
                self.phase_name = phase.name
                handler = handlers.get(phase.name)
                if handler is None:
                    raise ValueError(f"unknown phase {phase.name!r}")
                handler(phase)
                self.report.completed_phases.append(phase.name)
        except TimeoutExpired as exc:
            self.report.failure = f"TimeoutExpired({exc.phase})"
        except AuthFailed as exc:
            self.report.failure = f"AuthFailed({exc})"
        except Exception as exc:  # link/protocol failures abort the session
            self.report.failure = f"{type(exc).__name__}({exc})"
        if self.m.verify_aka:
            self.report.aka_ok = bool(self.aka_rounds) and all(self.aka_rounds)
        self.report.elapsed_ms = max(0.0, self.last_event - (self.t0 or 0.0))
        return self.report

    # -- plumbing -----------------------------------------------------------

    def _note_timing(self, timing: Timing):
        if self.t0 is None:
            self.t0 = timing.start_ms
        events = timing.events()
        previous = events[0]
        for arrival in events[1:]:
            gap = arrival - previous
            if gap > self.m.waiting_time_ms:
                self.last_event = previous + self.m.waiting_time_ms
                raise TimeoutExpired(
                    self.phase_name,
                    f"{gap:.0f} ms gap, budget {self.m.waiting_time_ms:.0f} ms",
                )
            previous = arrival
        self.last_event = events[-1]

    def _walk_procedure(self, cmd: CommandApdu, resp: ResponseApdu,
                        timing: Timing):
        # Replay the byte-level view: NULL per stall tick, then the INS
        # echo transferring the body, then SW1. SW2 is taken from the
        # response itself (the pair is already complete at APDU level).
        state = ProcedureState(cmd.ins)
        for _ in timing.nulls:
            assert state.step(0x60).kind is StepKind.WAITED
        assert state.step(cmd.ins).kind is StepKind.TRANSFER_ALL
        assert state.step(resp.sw1).kind is StepKind.STATUS_STARTED

    def _exchange(self, cmd: CommandApdu, retry_wrong_le: bool = True) -> ResponseApdu:
        resp, timing = self.link.exchange(cmd)
        self._note_timing(timing)
        self._walk_procedure(cmd, resp, timing)
        if self.tracer is not None:
            base = self.t0 or 0.0
            self.tracer.command(timing.start_ms - base, cmd)
            self.tracer.response(timing.done_ms - base, resp, command=cmd)
        self.report.exchanges += 1
        status = classify_status(resp.sw1, resp.sw2)
        if status.kind is StatusKind.PROACTIVE_PENDING:
            self.pending_proactive = status.value
        elif status.kind is StatusKind.OK:
            self.pending_proactive = None
        if status.kind is StatusKind.WRONG_LE and retry_wrong_le:
            corrected = CommandApdu(cmd.cla, cmd.ins, cmd.p1, cmd.p2,
                                    data=cmd.data, le=status.value or 256)
            return self._exchange(corrected, retry_wrong_le=False)
        return resp

    def _expect_success(self, resp: ResponseApdu, what: str) -> ResponseApdu:
        kind = classify_status(resp.sw1, resp.sw2).kind
        if kind not in (StatusKind.OK, StatusKind.PROACTIVE_PENDING):
            raise RuntimeError(f"{what} answered {resp.sw1:02X}{resp.sw2:02X}")
        return resp

    # -- phases ---------------------------------------------------------------

    def _phase_reset(self, phase: Phase):
        atr_bytes, timing = self.link.reset()
        self._note_timing(timing)
        if not atr_bytes:
            raise RuntimeError("empty ATR")

    def _phase_read_iccid(self, phase: Phase):
        self._expect_success(
            self._exchange(CommandApdu(0x00, INS_SELECT, 0x00, 0x04, data=EF_ICCID)),
            "SELECT EF_ICCID",
        )
        resp = self._expect_success(
            self._exchange(CommandApdu(0x00, INS_READ_BINARY, 0x00, 0x00, le=10)),
            "READ BINARY EF_ICCID",
        )
        self.report.iccid = decode_iccid(resp.data)

    def _phase_select_usim(self, phase: Phase):
        self._expect_success(
            self._exchange(CommandApdu(0x00, INS_SELECT, 0x04, 0x04, data=USIM_AID)),
            "SELECT ADF_USIM",
        )

    def _phase_read_imsi(self, phase: Phase):
        self._expect_success(
            self._exchange(CommandApdu(0x00, INS_SELECT, 0x00, 0x04, data=EF_IMSI)),
            "SELECT EF_IMSI",
        )
        resp = self._expect_success(
            self._exchange(CommandApdu(0x00, INS_READ_BINARY, 0x00, 0x00, le=9)),
            "READ BINARY EF_IMSI",
        )
        self.report.imsi = decode_imsi(resp.data)

    def _phase_authenticate(self, phase: Phase):
        for _ in range(phase.count):
            rand = bytes(self.rng.randrange(256) for _ in range(16))
            resp = self._exchange(
                CommandApdu(0x00, INS_AUTHENTICATE, 0x00, 0x81, data=rand, le=56)
            )
            kind = classify_status(resp.sw1, resp.sw2).kind
            if kind not in (StatusKind.OK, StatusKind.PROACTIVE_PENDING):
                raise AuthFailed(f"status {resp.sw1:02X}{resp.sw2:02X}")
            if not self.m.verify_aka:
                continue
            sqn = verify_aka_response(self.m.k, self.m.op_salt, rand, resp.data)
            if self.last_sqn is not None and sqn <= self.last_sqn:
                raise AuthFailed(f"sequence counter did not advance: {sqn}")
            self.last_sqn = sqn
            self.aka_rounds.append(True)

    def _phase_status_poll(self, phase: Phase):
        for i in range(phase.count):
            self._expect_success(
                self._exchange(CommandApdu(0x00, INS_STATUS, 0x00, 0x00)),
                "STATUS",
            )
            if phase.period_ms and i + 1 < phase.count and hasattr(self.link, "idle"):
                self.link.idle(phase.period_ms)

    def _phase_proactive_fetch(self, phase: Phase):
        # Drain whatever the card announced; each fetched command gets a
        # terminal response so hidden activity is fully acknowledged.
        safety = 16
        while self.pending_proactive and safety:
            safety -= 1
            fetched = self._expect_success(
                self._exchange(
                    CommandApdu(0x80, INS_FETCH, 0x00, 0x00,
                                le=self.pending_proactive)
                ),
                "FETCH",
            )
            info = tlv.parse_proactive(fetched.data)
            if info is None:
                raise RuntimeError("undecodable proactive envelope")
            body = (
                tlv.encode_tlv(
                    tlv.TAG_COMMAND_DETAILS,
                    bytes([info.command_number, info.type_octet, info.qualifier]),
                )
                + tlv.encode_tlv(
                    tlv.TAG_DEVICE_IDENTITIES,
                    bytes([tlv.DEV_TERMINAL, tlv.DEV_UICC]),
                )
                + tlv.encode_tlv(tlv.TAG_RESULT, b"\x00")
            )
            self._expect_success(
                self._exchange(
                    CommandApdu(0x80, INS_TERMINAL_RESPONSE, 0x00, 0x00, data=body)
                ),
                "TERMINAL RESPONSE",
            )
