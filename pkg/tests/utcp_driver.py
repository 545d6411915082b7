"""Randomized drivers and the table interpreter used as oracles for utcp."""

import json
import pathlib
import random

from splicemon.packet import FlowKey, TcpFlags, TcpSegment, mss_option, seq_add, seq_diff
from splicemon.utcp import (
    ActionKind,
    ExtEvent,
    ExtKind,
    Phase,
    classify_segment,
    initial_sequence,
    new_flow,
    on_external_event,
    on_tunnel_segment,
)

TABLE_PATH = pathlib.Path(__file__).parents[1] / "src" / "splicemon" / "data" / "utcp_transitions.json"


class TableInterpreter:
    """Walks the published edge list; knows nothing about sequence numbers."""

    def __init__(self, table=None):
        self.table = table or json.loads(TABLE_PATH.read_text())
        self.phase = self.table["initial"]["phase"]
        self.flags = dict(self.table["initial"]["flags"])

    def matching(self, event):
        out = []
        for edge in self.table["edges"]:
            if edge["phase"] != self.phase or edge["event"] != event:
                continue
            when = edge.get("when", {})
            if all(self.flags.get(k) == v for k, v in when.items()):
                out.append(edge)
        return out

    def feed(self, event):
        edges = self.matching(event)
        if len(edges) != 1:
            raise LookupError(f"{len(edges)} edges for {self.phase} {event} {self.flags}")
        edge = edges[0]
        self.flags.update(edge.get("set", {}))
        self.phase = edge["next"]
        return self.phase, tuple(edge["actions"])


def kinds(actions):
    return tuple(a.kind.value for a in actions)


def collapse(kind_seq):
    out = []
    for k in kind_seq:
        if not out or out[-1] != k:
            out.append(k)
    return tuple(out)


KEY = FlowKey.make(6, "10.0.0.2", 43512, "31.13.79.251", 443)


class Driver:
    """Plays a plausible app stack and server against one flow, plus fuzz."""

    def __init__(self, seed, fuzz=0.1, mss=None):
        self.rng = random.Random(seed)
        self.fuzz = fuzz
        self.state = new_flow(KEY, initial_sequence(seed))
        self.irs = self.rng.getrandbits(32)
        self.app_nxt = self.irs  # next sequence number the app will use
        self.app_fin = False
        self.mss = mss or self.rng.choice([536, 1000, 1460])
        self.connected = False
        self.trace = []  # (symbol, phase, action kinds)
        self.emitted = 0
        self.delivered = 0
        self.fin_emitted = False
        self.fin_consumed = False
        self.synack_emitted = False
        self.violations = []
        self.last_peer_ack = None

    # -- inputs ---------------------------------------------------------------

    def app_segment(self, flags, payload=b"", seq=None, ack=None):
        st = self.state
        seg = TcpSegment(
            KEY.src_port, KEY.dst_port,
            seq=self.app_nxt if seq is None else seq,
            ack=(st.snd_nxt if ack is None else ack),
            flags=flags, window=self.rng.choice([0, 4096, 65535]), payload=payload,
            options=mss_option(self.mss) if flags & TcpFlags.SYN else b"",
        )
        return seg

    def tunnel(self, seg):
        sym = "T:" + classify_segment(self.state, seg)
        self.state, actions = on_tunnel_segment(self.state, seg)
        self.record(sym, actions)
        return actions

    def external(self, ev):
        sym = "X:" + ev.kind.value
        self.state, actions = on_external_event(self.state, ev)
        self.record(sym, actions)
        return actions

    # -- bookkeeping / invariant checks -----------------------------------------

    def record(self, sym, actions):
        st = self.state
        self.trace.append((sym, st.phase.value, collapse(kinds(actions))))
        for i, a in enumerate(actions):
            if a.kind is ActionKind.EMIT_SEGMENT:
                seg = a.segment
                if seg.flags & TcpFlags.SYN:
                    if not self.connected and sym != "X:CONNECTED":
                        self.violations.append("SYN-ACK before CONNECTED")
                    self.synack_emitted = True
                if seg.flags & TcpFlags.FIN:
                    self.fin_emitted = True
                if len(seg.payload) > st.peer_mss:
                    self.violations.append("segment exceeds peer MSS")
                self.emitted += len(seg.payload)
            elif a.kind is ActionKind.DELIVER_PAYLOAD:
                self.delivered += len(a.data)
                covering = [b for b in actions[i + 1:] if b.kind is ActionKind.EMIT_SEGMENT
                            and b.segment.flags & TcpFlags.ACK and b.segment.ack == st.rcv_nxt]
                if not covering:
                    self.violations.append("delivered bytes without covering ACK")
            elif a.kind is ActionKind.CLOSE_EXTERNAL and a.mode == "write":
                self.fin_consumed = True
        if sym == "X:CONNECTED":
            self.connected = True
        expect = (1 if self.synack_emitted else 0) + self.emitted + (1 if self.fin_emitted else 0)
        if seq_diff(st.snd_nxt, st.iss) != expect:
            self.violations.append(f"sequence conservation {seq_diff(st.snd_nxt, st.iss)} != {expect}")
        if st.phase is not Phase.CLOSED:
            mirror = 1 + self.delivered + (1 if self.fin_consumed else 0)
            if seq_diff(st.rcv_nxt, st.irs) != mirror:
                self.violations.append(f"mirror conservation {seq_diff(st.rcv_nxt, st.irs)} != {mirror}")

    # -- scenario ----------------------------------------------------------------

    def run(self, steps=60):
        rng = self.rng
        if rng.random() < 0.15:
            for _ in range(rng.randint(1, 3)):
                self.fuzz_step()
        self.tunnel(self.app_segment(TcpFlags.SYN, seq=self.irs))
        self.app_nxt = seq_add(self.irs, 1)
        for _ in range(steps):
            if self.state.phase in (Phase.ABORTED,) and rng.random() < 0.5:
                break
            if rng.random() < self.fuzz:
                self.fuzz_step()
            else:
                self.plausible_step()
        return self

    def fuzz_step(self):
        rng = self.rng
        if rng.random() < 0.4 and self.state.phase is not Phase.CLOSED:
            # In-window segment with arbitrary FIN/data and a possibly stale ACK.
            st = self.state
            flags = TcpFlags.ACK | rng.choice([TcpFlags(0), TcpFlags.FIN, TcpFlags.PSH])
            ack = st.snd_nxt if rng.random() < 0.5 else st.snd_una
            seg = TcpSegment(KEY.src_port, KEY.dst_port, seq=st.rcv_nxt, ack=ack, flags=flags,
                             window=65535, payload=rng.randbytes(rng.choice([0, 7])))
            self.tunnel(seg)
        elif rng.random() < 0.5:
            flags = TcpFlags(rng.getrandbits(6))
            seg = TcpSegment(KEY.src_port, KEY.dst_port, seq=rng.getrandbits(32), ack=rng.getrandbits(32),
                             flags=flags, payload=rng.randbytes(rng.choice([0, 0, 5])))
            self.tunnel(seg)
        else:
            ev = rng.choice([ExtEvent.connected(), ExtEvent.payload(b"z" * rng.randint(1, 50)),
                             ExtEvent.peer_closed(), ExtEvent.failed("io")])
            self.external(ev)

    def plausible_step(self):
        rng = self.rng
        st = self.state
        phase = st.phase
        choices = []
        if phase is Phase.SYN_SEEN and not st.synack_sent:
            choices += ["connected"] * 6 + ["failed", "syn_again"]
        if phase is Phase.SYN_SEEN and st.synack_sent:
            choices += ["ack"] * 4 + ["data", "syn_again"]
        if phase in (Phase.ESTABLISHED, Phase.FIN_WAIT_REMOTE) and not self.app_fin:
            choices += ["data"] * 4 + ["fin", "dup_data"]
        if phase in (Phase.ESTABLISHED, Phase.FIN_WAIT_LOCAL):
            choices += ["ext_data"] * 3 + ["peer_closed"]
        if phase in (Phase.FIN_WAIT_REMOTE, Phase.CLOSING, Phase.TIME_WAIT_BRIEF, Phase.FIN_WAIT_LOCAL):
            choices += ["ack"] * 2 + ["dup_fin"]
        if phase in (Phase.ESTABLISHED, Phase.FIN_WAIT_LOCAL, Phase.FIN_WAIT_REMOTE):
            choices += ["ack"]
        if phase is Phase.CLOSING:
            choices += ["fuzz"] * 2
        choices += ["rst"] if rng.random() < 0.05 else []
        if not choices:
            choices = ["ack"]
        step = rng.choice(choices)
        if step == "fuzz":
            self.fuzz_step()
        elif step == "connected":
            self.external(ExtEvent.connected())
        elif step == "failed":
            self.external(ExtEvent.failed("refused"))
        elif step == "syn_again":
            self.tunnel(self.app_segment(TcpFlags.SYN, seq=self.irs, ack=0))
        elif step == "ack":
            stale = self.state.snd_una if rng.random() < 0.2 else None
            self.tunnel(self.app_segment(TcpFlags.ACK, ack=stale))
        elif step == "data":
            data = rng.randbytes(rng.randint(1, 3000))
            stale = self.state.snd_una if rng.random() < 0.3 else None
            self.tunnel(self.app_segment(TcpFlags.ACK | TcpFlags.PSH, data, ack=stale))
            self.app_nxt = seq_add(self.app_nxt, len(data))
        elif step == "dup_data":
            data = rng.randbytes(rng.randint(1, 100))
            self.tunnel(self.app_segment(TcpFlags.ACK, data, seq=seq_add(self.app_nxt, -len(data))))
        elif step == "fin":
            data = rng.randbytes(rng.choice([0, 0, 40]))
            stale = self.state.snd_una if rng.random() < 0.3 else None
            self.tunnel(self.app_segment(TcpFlags.ACK | TcpFlags.FIN, data, ack=stale))
            self.app_nxt = seq_add(self.app_nxt, len(data) + 1)
            self.app_fin = True
        elif step == "dup_fin":
            seq = seq_add(self.app_nxt, -1) if self.app_fin else self.app_nxt
            self.tunnel(self.app_segment(TcpFlags.ACK | TcpFlags.FIN, seq=seq))
            if not self.app_fin:
                self.app_nxt = seq_add(self.app_nxt, 1)
                self.app_fin = True
        elif step == "ext_data":
            self.external(ExtEvent.payload(rng.randbytes(rng.randint(1, 5000))))
        elif step == "peer_closed":
            self.external(ExtEvent.peer_closed())
        elif step == "rst":
            self.tunnel(self.app_segment(TcpFlags.RST))


def edge_coverage(seeds):
    """Indices of table edges exercised by the random driver over ``seeds``."""
    table = json.loads(TABLE_PATH.read_text())
    covered = set()
    for seed in seeds:
        interp = TableInterpreter(table)
        for sym, _, _ in Driver(seed).run().trace:
            covered.add(table["edges"].index(interp.matching(sym)[0]))
            interp.feed(sym)
    return covered, len(table["edges"])


def interpret(trace):
    interp = TableInterpreter()
    return [(sym,) + interp.feed(sym) for sym, _, _ in trace]


__all__ = ["Driver", "TableInterpreter", "edge_coverage", "interpret", "kinds", "KEY", "TABLE_PATH"]
