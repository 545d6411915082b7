"""User-space TCP for the app-facing side of a relayed flow.

The two transition functions are pure: they take a frozen
:class:`TcpFlowState` plus one input and return the next state together with
an ordered list of :class:`TcpAction` for the relay to apply. Nothing here
touches sockets, clocks or the tunnel.

Deliberate simplifications, valid because the tunnel is an in-host lossless
queue:

* the SYN-ACK is withheld until the external connection is up, so an
  unreachable server shows up at the app as a reset;
* no retransmission timers and no reassembly; out-of-order segments get a
  duplicate ACK and the app's own stack retransmits;
* a fixed advertised window and no window scaling, so the app's window
  fields are read unscaled.

The edge list in ``data/utcp_transitions.json`` documents every transition.
"""

from __future__ import annotations

import enum
import json
import random
import secrets
from dataclasses import dataclass, replace
from importlib import resources

from .packet import FlowKey, TcpFlags, TcpSegment, mss_option, seq_add, seq_diff, seq_leq, seq_lt

DEFAULT_WINDOW = 65535
DEFAULT_MSS = 536  # RFC 1122 default when the SYN carries no MSS option

# initial_sequence(0); pinned so replays are comparable across runs.
ISS_SEED_ZERO = 3626764237


class Phase(enum.Enum):
    CLOSED = "CLOSED"
    SYN_SEEN = "SYN_SEEN"
    ESTABLISHED = "ESTABLISHED"
    FIN_WAIT_LOCAL = "FIN_WAIT_LOCAL"
    FIN_WAIT_REMOTE = "FIN_WAIT_REMOTE"
    CLOSING = "CLOSING"
    TIME_WAIT_BRIEF = "TIME_WAIT_BRIEF"
    ABORTED = "ABORTED"


class ActionKind(enum.Enum):
    EMIT_SEGMENT = "EMIT_SEGMENT"
    DELIVER_PAYLOAD = "DELIVER_PAYLOAD"
    OPEN_EXTERNAL = "OPEN_EXTERNAL"
    CLOSE_EXTERNAL = "CLOSE_EXTERNAL"
    DROP = "DROP"
    RESET = "RESET"


# Notes attached to actions for the conditions a textbook stack would treat as errors.
OUT_OF_ORDER = "out_of_order"
STRAY = "stray_segment"
INVALID_PHASE = "event_in_invalid_phase"


@dataclass(frozen=True)
class TcpAction:
    kind: ActionKind
    segment: TcpSegment | None = None
    data: bytes = b""
    key: FlowKey | None = None
    mode: str = ""  # CLOSE_EXTERNAL: "write" (half-close) or "abort"
    note: str = ""


class ExtKind(enum.Enum):
    CONNECTED = "CONNECTED"
    DATA = "DATA"
    PEER_CLOSED = "PEER_CLOSED"
    CONNECT_FAILED = "CONNECT_FAILED"


@dataclass(frozen=True)
class ExtEvent:
    kind: ExtKind
    data: bytes = b""
    reason: str = ""

    @classmethod
    def connected(cls) -> "ExtEvent":
        return cls(ExtKind.CONNECTED)

    @classmethod
    def payload(cls, data: bytes) -> "ExtEvent":
        if not data:
            raise ValueError("DATA event needs at least one byte")
        return cls(ExtKind.DATA, bytes(data))

    @classmethod
    def peer_closed(cls) -> "ExtEvent":
        return cls(ExtKind.PEER_CLOSED)

    @classmethod
    def failed(cls, reason: str) -> "ExtEvent":
        return cls(ExtKind.CONNECT_FAILED, reason=reason)


@dataclass(frozen=True)
class TcpFlowState:
    """Per-flow state. ``key`` is oriented app -> server."""

    key: FlowKey
    phase: Phase = Phase.CLOSED
    iss: int = 0
    snd_nxt: int = 0
    snd_una: int = 0
    irs: int = 0
    rcv_nxt: int = 0
    peer_mss: int = DEFAULT_MSS
    peer_window: int = 0
    local_mss: int = 1460
    advertised_window: int = DEFAULT_WINDOW
    splice_ref: FlowKey | None = None
    synack_sent: bool = False
    fin_sent: bool = False
    fin_received: bool = False
    delivered: int = 0
    emitted: int = 0


def new_flow(key: FlowKey, iss: int, local_mss: int = 1460, window: int = DEFAULT_WINDOW) -> TcpFlowState:
    return TcpFlowState(key=key, iss=iss, snd_nxt=iss, snd_una=iss, local_mss=local_mss,
                        advertised_window=window)


def initial_sequence(seed: int | None = None) -> int:
    """32-bit initial sequence number; deterministic when ``seed`` is given."""
    if seed is None:
        return secrets.randbits(32)
    return random.Random(seed).getrandbits(32)


def send_capacity(state: TcpFlowState) -> int:
    """Bytes the app's advertised window still admits beyond what is in flight."""
    return max(0, state.peer_window - seq_diff(state.snd_nxt, state.snd_una))


def fin_acked(state: TcpFlowState) -> bool:
    return state.fin_sent and state.snd_una == state.snd_nxt


def load_transition_table() -> dict:
    """The published edge list (used by docs and the reference interpreter)."""
    text = resources.files("splicemon").joinpath("data/utcp_transitions.json").read_text()
    return json.loads(text)


# -- segment builders ------------------------------------------------------------


def _seg(state: TcpFlowState, flags: TcpFlags, seq: int | None = None, payload: bytes = b"",
         options: bytes = b"") -> TcpSegment:
    return TcpSegment(
        src_port=state.key.dst_port,
        dst_port=state.key.src_port,
        seq=state.snd_nxt if seq is None else seq,
        ack=state.rcv_nxt,
        flags=flags,
        window=state.advertised_window,
        options=options,
        payload=payload,
    )


def _ack(state: TcpFlowState, note: str = "") -> TcpAction:
    return TcpAction(ActionKind.EMIT_SEGMENT, _seg(state, TcpFlags.ACK), note=note)


def _reset(state: TcpFlowState, note: str = "") -> TcpAction:
    if state.synack_sent:
        seg = _seg(state, TcpFlags.RST | TcpFlags.ACK)
    else:
        # The app never saw our ISN; RFC 793 reset for a SYN-SENT peer.
        seg = _seg(state, TcpFlags.RST | TcpFlags.ACK, seq=0)
    return TcpAction(ActionKind.RESET, seg, note=note)


def _reset_for(key: FlowKey, seg: TcpSegment) -> TcpAction:
    """Reset answering a segment that matches no live connection."""
    if seg.has(TcpFlags.ACK):
        out = TcpSegment(key.dst_port, key.src_port, seq=seg.ack, flags=TcpFlags.RST, window=0)
    else:
        out = TcpSegment(key.dst_port, key.src_port, seq=0, ack=seq_add(seg.seq, seg.seq_len),
                         flags=TcpFlags.RST | TcpFlags.ACK, window=0)
    return TcpAction(ActionKind.RESET, out, note=STRAY)


def _drop(note: str = "") -> TcpAction:
    return TcpAction(ActionKind.DROP, note=note)


def _close_external(mode: str) -> TcpAction:
    return TcpAction(ActionKind.CLOSE_EXTERNAL, mode=mode)


def _abort(state: TcpFlowState, note: str = INVALID_PHASE) -> tuple[TcpFlowState, list[TcpAction]]:
    return replace(state, phase=Phase.ABORTED), [_reset(state, note), _close_external("abort")]


# -- classification -----------------------------------------------------------------


def classify_segment(state: TcpFlowState, seg: TcpSegment) -> str:
    """Symbol naming how ``seg`` acts on ``state`` (the ``T:`` events of the table)."""
    if seg.has(TcpFlags.RST):
        return "RST"
    if state.phase in (Phase.CLOSED, Phase.ABORTED):
        return "STRAY" if not seg.has(TcpFlags.SYN) or state.phase is Phase.ABORTED else "SYN"
    if seg.has(TcpFlags.SYN):
        return "SYN"
    if state.phase is Phase.SYN_SEEN and not (
        state.synack_sent and seg.has(TcpFlags.ACK) and seg.ack == state.snd_nxt
    ):
        return "BADACK"
    has_fin = seg.has(TcpFlags.FIN)
    if seg.payload or has_fin:
        if seg.seq != state.rcv_nxt:
            base = "OOO"
        elif seg.payload and has_fin:
            base = "DATA_FIN"
        else:
            base = "FIN" if has_fin else "DATA"
    else:
        base = "ACK"
    if (
        state.phase in (Phase.FIN_WAIT_REMOTE, Phase.CLOSING)
        and seg.has(TcpFlags.ACK)
        and seg.ack == state.snd_nxt
    ):
        base += "+finack"
    return base


def _apply_ack(state: TcpFlowState, seg: TcpSegment) -> TcpFlowState:
    if not seg.has(TcpFlags.ACK) or not state.synack_sent:
        return state
    una = state.snd_una
    if seq_lt(una, seg.ack) and seq_leq(seg.ack, state.snd_nxt):
        una = seg.ack
    return replace(state, snd_una=una, peer_window=seg.window)


# -- transitions --------------------------------------------------------------------


def on_tunnel_segment(state: TcpFlowState, seg: TcpSegment) -> tuple[TcpFlowState, list[TcpAction]]:
    """Advance the flow with one segment the app sent into the tunnel."""
    sym = classify_segment(state, seg)
    phase = state.phase

    if sym == "RST":
        if phase in (Phase.CLOSED, Phase.ABORTED):
            return state, [_drop()]
        return replace(state, phase=Phase.ABORTED), [_close_external("abort")]

    if sym == "STRAY":
        return state, [_reset_for(state.key, seg)]

    if phase is Phase.CLOSED:  # sym == "SYN"
        nxt = replace(
            state,
            phase=Phase.SYN_SEEN,
            irs=seg.seq,
            rcv_nxt=seq_add(seg.seq, 1),
            peer_mss=seg.mss or DEFAULT_MSS,
            peer_window=seg.window,
            splice_ref=state.key,
        )
        return nxt, [TcpAction(ActionKind.OPEN_EXTERNAL, key=state.key)]

    if sym == "SYN":
        if phase is Phase.SYN_SEEN:
            if state.synack_sent:
                return state, [TcpAction(ActionKind.EMIT_SEGMENT, _synack(state))]
            return state, [_drop("syn_retransmit")]
        return state, [_ack(state, "challenge_ack")]

    if sym == "BADACK":
        return state, [_drop("unacceptable_ack")]

    state = _apply_ack(state, seg)
    finack = sym.endswith("+finack")
    base = sym.split("+")[0]

    if phase is Phase.SYN_SEEN:
        # The app acknowledged our SYN-ACK; process the rest as ESTABLISHED.
        phase = Phase.ESTABLISHED
        state = replace(state, phase=phase)

    if base == "ACK":
        if phase is Phase.CLOSING and finack:
            return replace(state, phase=Phase.TIME_WAIT_BRIEF), []
        return state, []

    if base == "OOO":
        nxt_phase = Phase.TIME_WAIT_BRIEF if (phase is Phase.CLOSING and finack) else phase
        return replace(state, phase=nxt_phase), [_ack(state, OUT_OF_ORDER)]

    if phase in (Phase.FIN_WAIT_LOCAL, Phase.CLOSING, Phase.TIME_WAIT_BRIEF):
        # The app's FIN is already consumed; nothing more can be delivered.
        nxt_phase = Phase.TIME_WAIT_BRIEF if (phase is Phase.CLOSING and finack) else phase
        return replace(state, phase=nxt_phase), [_ack(state, OUT_OF_ORDER)]

    # ESTABLISHED or FIN_WAIT_REMOTE with in-order DATA / FIN / DATA_FIN.
    actions: list[TcpAction] = []
    consumed = len(seg.payload)
    if seg.payload:
        actions.append(TcpAction(ActionKind.DELIVER_PAYLOAD, data=seg.payload))
    if base in ("FIN", "DATA_FIN"):
        consumed += 1
    state = replace(state, rcv_nxt=seq_add(state.rcv_nxt, consumed),
                    delivered=state.delivered + len(seg.payload))
    if base == "DATA":
        actions.append(_ack(state))
        return state, actions

    state = replace(state, fin_received=True)
    actions.append(_ack(state))
    actions.append(_close_external("write"))
    if phase is Phase.ESTABLISHED:
        return replace(state, phase=Phase.FIN_WAIT_LOCAL), actions
    nxt_phase = Phase.TIME_WAIT_BRIEF if finack else Phase.CLOSING
    return replace(state, phase=nxt_phase), actions


def _synack(state: TcpFlowState) -> TcpSegment:
    return _seg(state, TcpFlags.SYN | TcpFlags.ACK, seq=state.iss, options=mss_option(state.local_mss))


def segment_payload(state: TcpFlowState, data: bytes) -> tuple[TcpFlowState, list[TcpAction]]:
    actions = []
    mss = max(1, state.peer_mss)
    for off in range(0, len(data), mss):
        chunk = data[off : off + mss]
        last = off + mss >= len(data)
        flags = TcpFlags.ACK | (TcpFlags.PSH if last else TcpFlags(0))
        actions.append(TcpAction(ActionKind.EMIT_SEGMENT, _seg(state, flags, payload=chunk)))
        state = replace(state, snd_nxt=seq_add(state.snd_nxt, len(chunk)), emitted=state.emitted + len(chunk))
    return state, actions


def on_external_event(state: TcpFlowState, ev: ExtEvent) -> tuple[TcpFlowState, list[TcpAction]]:
    """Advance the flow with one event from its external connection."""
    phase = state.phase
    kind = ev.kind

    if phase in (Phase.CLOSED, Phase.CLOSING, Phase.TIME_WAIT_BRIEF, Phase.ABORTED):
        return state, [_drop(INVALID_PHASE if phase is Phase.CLOSED else "")]

    if kind is ExtKind.CONNECT_FAILED:
        return replace(state, phase=Phase.ABORTED), [_reset(state, ev.reason)]

    if phase is Phase.SYN_SEEN:
        if kind is ExtKind.CONNECTED and not state.synack_sent:
            seg = _synack(state)
            return replace(state, snd_nxt=seq_add(state.iss, 1), synack_sent=True), [
                TcpAction(ActionKind.EMIT_SEGMENT, seg)
            ]
        return _abort(state)

    if kind is ExtKind.CONNECTED:
        return _abort(state)

    if kind is ExtKind.DATA:
        if phase is Phase.FIN_WAIT_REMOTE:
            return _abort(state)
        return segment_payload(state, ev.data)

    # PEER_CLOSED
    if phase is Phase.FIN_WAIT_REMOTE:
        return state, [_drop("duplicate_close")]
    seg = _seg(state, TcpFlags.FIN | TcpFlags.ACK)
    nxt_phase = Phase.CLOSING if phase is Phase.FIN_WAIT_LOCAL else Phase.FIN_WAIT_REMOTE
    state = replace(state, phase=nxt_phase, snd_nxt=seq_add(state.snd_nxt, 1), fin_sent=True)
    return state, [TcpAction(ActionKind.EMIT_SEGMENT, seg)]


def stray_reset(key: FlowKey, seg: TcpSegment) -> TcpAction | None:
    """Reset for a segment arriving with no flow state (``None`` for RST input)."""
    if seg.has(TcpFlags.RST):
        return None
    return _reset_for(key, seg)
