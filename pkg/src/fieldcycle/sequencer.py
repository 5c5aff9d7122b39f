"""Multi-channel pulse programs on a 1 ns grid.

A program is an ordered list of statements.  `at <t> <CH> on|off` places an
edge; inside a loop body the time is relative to the iteration start, at top
level it is absolute.  `loop N period P { ... }` repeats its body N times, P
ns apart; loops start where the previous loop in the same block ended (at
statements never advance that cursor), so loops in one block occupy disjoint,
consecutive time spans.

Compilation is lazy: each leaf statement becomes a generator over its
iteration lattice and the streams are heap-merged, so memory stays bounded
by program size however large the loop counts are.  Equal-time events order
off before on, then LASER < MW < SHUTTLE < RF < ACQ.

Validation never unrolls a loop fully.  Because loops cannot overlap each
other, every interleaving involves loop iterations and absolute (top-level)
edges only; checking iterations {0, 1, last} of each loop plus the
iterations adjacent to each absolute edge is exhaustive, which keeps
validate O(program size) even for 10M-window programs.
"""

from __future__ import annotations

import heapq
import struct
from dataclasses import dataclass, field

from .acquisition import ArtifactFormatError

CHANNELS = ("LASER", "MW", "SHUTTLE", "RF", "ACQ")
_CH_ORDER = {name: i for i, name in enumerate(CHANNELS)}
ACTIONS = ("off", "on")

EVENT_LOG_MAGIC = b"FCEV"
EVENT_LOG_VERSION = 1
_EVENT_RECORD = struct.Struct("<QBB")

VIOLATION_KINDS = ("rf_acq_overlap", "shuttle_during_acq", "unmatched_onoff",
                   "body_exceeds_period")


class ParseError(ValueError):
    """Syntax or semantic error in program text, with position."""

    def __init__(self, line, column, message):
        self.line = line
        self.column = column
        self.message = message
        super().__init__(f"line {line}, col {column}: {message}")


class ProgramInvalidError(ValueError):
    """Raised by compile_program when validate reports violations."""

    def __init__(self, violations):
        self.violations = list(violations)
        head = "; ".join(v.message for v in self.violations[:3])
        more = len(self.violations) - 3
        if more > 0:
            head += f" (+{more} more)"
        super().__init__(f"program has {len(self.violations)} violation(s): "
                         f"{head}")


@dataclass(frozen=True)
class AtStatement:
    t_ns: int
    channel: str
    action: str

    def __post_init__(self):
        if not isinstance(self.t_ns, int) or self.t_ns < 0:
            raise ValueError("time must be a non-negative integer ns")
        if self.channel not in _CH_ORDER:
            raise ValueError(f"unknown channel {self.channel!r}")
        if self.action not in ACTIONS:
            raise ValueError(f"action must be on or off, got {self.action!r}")


@dataclass(frozen=True)
class LoopStatement:
    count: int
    period_ns: int
    body: tuple

    def __post_init__(self):
        if not isinstance(self.count, int) or self.count < 1:
            raise ValueError("loop count must be >= 1")
        if not isinstance(self.period_ns, int) or self.period_ns < 1:
            raise ValueError("loop period must be a positive integer ns")
        object.__setattr__(self, "body", tuple(self.body))


@dataclass(frozen=True)
class PulseProgram:
    statements: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "statements", tuple(self.statements))


@dataclass(frozen=True)
class Violation:
    kind: str
    message: str
    t_start: int
    t_end: int = None
    channel: str = None


class EventStream:
    """Compiled events: a single-consumer iterator of (t_ns, channel, action).

    duration is the program span (cursor end), n_events the total count;
    both are closed-form, reading them does not consume the stream.
    """

    def __init__(self, events, duration, n_events):
        self.events = events
        self.duration = duration
        self.n_events = n_events

    def __iter__(self):
        return iter(self.events)


def _event_key(ev):
    return (ev[0], ev[2] == "on", _CH_ORDER[ev[1]])


# ---------------------------------------------------------------------------
# parsing and printing

def _tokenize(text):
    """(value, line, col) tokens; '#' starts a comment, ';' is a separator."""
    out = []
    for ln, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0]
        i = 0
        while i < len(line):
            c = line[i]
            if c.isspace() or c == ";":
                i += 1
                continue
            if c in "{}":
                out.append((c, ln, i + 1))
                i += 1
                continue
            j = i
            while j < len(line) and not line[j].isspace() \
                    and line[j] not in "{};":
                j += 1
            out.append((line[i:j], ln, i + 1))
            i = j
    return out


class _TokenCursor:
    def __init__(self, tokens):
        self.tokens = tokens
        self.pos = 0

    def peek(self):
        return self.tokens[self.pos] if self.pos < len(self.tokens) else None

    def next(self, expect_desc):
        tok = self.peek()
        if tok is None:
            last = self.tokens[-1] if self.tokens else ("", 1, 1)
            raise ParseError(last[1], last[2] + len(last[0]),
                             f"unexpected end of input, expected "
                             f"{expect_desc}")
        self.pos += 1
        return tok


def _parse_time(tok):
    value, ln, col = tok
    try:
        t = int(value)
    except ValueError:
        raise ParseError(ln, col, f"integer time required, got {value!r}")
    if str(t) != value:  # reject 1e3, 007 style spellings
        raise ParseError(ln, col, f"integer time required, got {value!r}")
    if t < 0:
        raise ParseError(ln, col, "non-negative time required")
    return t


def _parse_statements(cur, depth):
    stmts = []
    while True:
        tok = cur.peek()
        if tok is None:
            if depth:
                raise ParseError(*_pos_of(cur), "missing '}'")
            return stmts
        value, ln, col = tok
        if value == "}":
            if not depth:
                raise ParseError(ln, col, "unmatched '}'")
            return stmts
        if value == "at":
            cur.next("at")
            t = _parse_time(cur.next("time"))
            chv, chl, chc = cur.next("channel")
            if chv not in _CH_ORDER:
                raise ParseError(chl, chc, f"unknown channel {chv!r}")
            av, al, ac = cur.next("on or off")
            if av not in ACTIONS:
                raise ParseError(al, ac, f"expected on or off, got {av!r}")
            stmts.append(AtStatement(t_ns=t, channel=chv, action=av))
        elif value == "loop":
            cur.next("loop")
            cv, cl, cc = cur.next("loop count")
            try:
                count = int(cv)
            except ValueError:
                raise ParseError(cl, cc, f"integer loop count required, "
                                         f"got {cv!r}")
            if count < 1:
                raise ParseError(cl, cc, "loop count must be >= 1")
            kw, kl, kc = cur.next("'period'")
            if kw != "period":
                raise ParseError(kl, kc, f"expected 'period', got {kw!r}")
            period = _parse_time(cur.next("period"))
            if period < 1:
                raise ParseError(kl, kc, "loop period must be >= 1 ns")
            bv, bl, bc = cur.next("'{'")
            if bv != "{":
                raise ParseError(bl, bc, f"expected '{{', got {bv!r}")
            body = _parse_statements(cur, depth + 1)
            cur.next("'}'")  # the '}' peeked by the recursive call
            stmts.append(LoopStatement(count=count, period_ns=period,
                                       body=tuple(body)))
        else:
            raise ParseError(ln, col, f"expected 'at' or 'loop', "
                                      f"got {value!r}")


def _pos_of(cur):
    if cur.tokens:
        v, ln, col = cur.tokens[-1]
        return ln, col + len(v)
    return 1, 1


def parse_program(text) -> PulseProgram:
    """Parse program text; errors carry (line, column, message)."""
    cur = _TokenCursor(_tokenize(text))
    stmts = _parse_statements(cur, 0)
    return PulseProgram(statements=tuple(stmts))


def print_program(program: PulseProgram) -> str:
    """Canonical text form; parse(print(p)) reproduces p exactly."""
    lines = []

    def emit(stmts, indent):
        pad = "  " * indent
        for st in stmts:
            if isinstance(st, AtStatement):
                lines.append(f"{pad}at {st.t_ns} {st.channel} {st.action}")
            else:
                lines.append(f"{pad}loop {st.count} period {st.period_ns} {{")
                emit(st.body, indent + 1)
                lines.append(f"{pad}}}")

    emit(program.statements, 0)
    return "\n".join(lines) + ("\n" if lines else "")


# ---------------------------------------------------------------------------
# structure queries

def _block_metrics(stmts):
    """(duration, n_events) of a block under cursor semantics."""
    cursor = 0
    duration = 0
    n_events = 0
    for st in stmts:
        if isinstance(st, AtStatement):
            duration = max(duration, st.t_ns)
            n_events += 1
        else:
            inner_dur, inner_n = _block_metrics(st.body)
            duration = max(duration, cursor + st.count * st.period_ns)
            cursor += st.count * st.period_ns
            n_events += st.count * inner_n
    return duration, n_events


def program_duration(program: PulseProgram) -> int:
    return _block_metrics(program.statements)[0]


# ---------------------------------------------------------------------------
# validation

def _collect_body_violations(stmts, out):
    for st in stmts:
        if isinstance(st, LoopStatement):
            dur, _ = _block_metrics(st.body)
            if dur > st.period_ns:
                out.append(Violation(
                    kind="body_exceeds_period",
                    message=f"loop body spans {dur} ns but the period is "
                            f"only {st.period_ns} ns",
                    t_start=0, t_end=dur))
            _collect_body_violations(st.body, out)


def _static_probe_times(stmts):
    """Absolute times of top-level at edges (the only non-periodic events)."""
    return [st.t_ns for st in stmts if isinstance(st, AtStatement)]


def _abridged(stmts, base, probes, out):
    """Representative expansion: loop iterations {0, 1, last} plus any
    iteration within one period of a probe time.  Exhaustive for overlap
    and alternation checks because loops never overlap each other."""
    cursor = 0
    for st in stmts:
        if isinstance(st, AtStatement):
            out.append((base + st.t_ns, st.channel, st.action))
        else:
            start = base + cursor
            picks = {0, 1, st.count - 1, st.count - 2}
            for p in probes:
                i0 = (p - start) // st.period_ns
                picks.update((i0 - 1, i0, i0 + 1))
            for i in sorted(x for x in picks if 0 <= x < st.count):
                _abridged(st.body, start + i * st.period_ns, probes, out)
            cursor += st.count * st.period_ns


def _pair_intervals(events):
    """Per-channel on intervals plus alternation violations from a sweep."""
    intervals = {ch: [] for ch in CHANNELS}
    open_at = {ch: None for ch in CHANNELS}
    violations = []
    for t, ch, act in events:
        if act == "on":
            if open_at[ch] is not None:
                violations.append(Violation(
                    kind="unmatched_onoff", channel=ch,
                    message=f"{ch} turned on at {t} ns while already on "
                            f"since {open_at[ch]} ns",
                    t_start=open_at[ch], t_end=t))
                intervals[ch].append((open_at[ch], t))
            open_at[ch] = t
        else:
            if open_at[ch] is None:
                violations.append(Violation(
                    kind="unmatched_onoff", channel=ch,
                    message=f"{ch} turned off at {t} ns without being on",
                    t_start=t))
            else:
                intervals[ch].append((open_at[ch], t))
                open_at[ch] = None
    for ch, t0 in open_at.items():
        if t0 is not None:
            violations.append(Violation(
                kind="unmatched_onoff", channel=ch,
                message=f"{ch} turned on at {t0} ns and never off",
                t_start=t0))
    return intervals, violations


def _interval_overlaps(a, b):
    """Intersections of two sorted half-open interval lists."""
    out = []
    i = j = 0
    while i < len(a) and j < len(b):
        lo = max(a[i][0], b[j][0])
        hi = min(a[i][1], b[j][1])
        if lo < hi:
            out.append((lo, hi, a[i], b[j]))
        if a[i][1] <= b[j][1]:
            i += 1
        else:
            j += 1
    return out


def validate(program: PulseProgram):
    """All rule violations, empty when the program is clean.

    Checks: (rf_acq_overlap) RF and ACQ simultaneously on;
    (shuttle_during_acq) a SHUTTLE trigger edge inside an ACQ window;
    (unmatched_onoff) broken on/off alternation or balance;
    (body_exceeds_period) loop body longer than its period.
    """
    out = []
    _collect_body_violations(program.statements, out)
    events = []
    probes = _static_probe_times(program.statements)
    _abridged(program.statements, 0, probes, events)
    events.sort(key=_event_key)
    intervals, alternation = _pair_intervals(events)
    out.extend(alternation)
    for lo, hi, ia, ib in _interval_overlaps(intervals["RF"],
                                             intervals["ACQ"]):
        out.append(Violation(
            kind="rf_acq_overlap",
            message=f"RF on {ia[0]}..{ia[1]} ns overlaps ACQ on "
                    f"{ib[0]}..{ib[1]} ns during {lo}..{hi} ns",
            t_start=lo, t_end=hi))
    acq = intervals["ACQ"]
    for t0, _t1 in intervals["SHUTTLE"]:
        for lo, hi in acq:
            if lo <= t0 < hi:
                out.append(Violation(
                    kind="shuttle_during_acq", channel="SHUTTLE",
                    message=f"SHUTTLE trigger at {t0} ns falls inside the "
                            f"ACQ window {lo}..{hi} ns",
                    t_start=t0))
                break
    out.sort(key=lambda v: (v.t_start, v.kind))
    return out


# ---------------------------------------------------------------------------
# compilation

def _leaf_streams(stmts, chain, leaves):
    """Flatten to (loop chain, leaf) pairs; chain entries are
    (start offset within parent frame, count, period)."""
    cursor = 0
    for st in stmts:
        if isinstance(st, AtStatement):
            leaves.append((tuple(chain), st))
        else:
            chain.append((cursor, st.count, st.period_ns))
            _leaf_streams(st.body, chain, leaves)
            chain.pop()
            cursor += st.count * st.period_ns


def _leaf_gen(chain, leaf):
    ch = leaf.channel
    act = leaf.action
    t_leaf = leaf.t_ns

    def rec(level, t_acc):
        if level == len(chain):
            yield (t_acc + t_leaf, ch, act)
            return
        off, count, period = chain[level]
        start = t_acc + off
        nxt = level + 1
        for i in range(count):
            yield from rec(nxt, start + i * period)

    return rec(0, 0)


def compile_program(program: PulseProgram) -> EventStream:
    """Validate then lazily compile to a sorted event stream.

    Each leaf statement's events are strictly increasing in time (loop
    bodies fit inside their periods once validation passes), so a k-way
    heap merge of the per-leaf generators yields the global order with
    memory bounded by the number of statements.
    """
    violations = validate(program)
    if violations:
        raise ProgramInvalidError(violations)
    duration, n_events = _block_metrics(program.statements)
    leaves = []
    _leaf_streams(program.statements, [], leaves)
    gens = [_leaf_gen(chain, leaf) for chain, leaf in leaves]
    if not gens:
        events = iter(())
    elif len(gens) == 1:
        events = gens[0]
    else:
        events = heapq.merge(*gens, key=_event_key)
    return EventStream(events=events, duration=duration, n_events=n_events)


def build_spinlock_program(n_pulses, t_p_ns, period_ns,
                           acq_gate) -> PulseProgram:
    """Loop program: RF pulse [0, t_p), acquisition gate between pulses."""
    acq_start, acq_end = acq_gate
    if not t_p_ns < acq_start:
        raise ValueError(f"need t_p < acq_start, got {t_p_ns} >= {acq_start}")
    if not acq_start < acq_end:
        raise ValueError(f"need acq_start < acq_end, got {acq_start} >= "
                         f"{acq_end}")
    if not acq_end <= period_ns:
        raise ValueError(f"need acq_end <= period, got {acq_end} > "
                         f"{period_ns}")
    body = (AtStatement(0, "RF", "on"),
            AtStatement(int(t_p_ns), "RF", "off"),
            AtStatement(int(acq_start), "ACQ", "on"),
            AtStatement(int(acq_end), "ACQ", "off"))
    return PulseProgram(statements=(
        LoopStatement(count=int(n_pulses), period_ns=int(period_ns),
                      body=body),))


# ---------------------------------------------------------------------------
# binary event log

def write_event_log(path, events):
    """Records (t: u64 ns, ch: u8, action: u8), magic FCEV, version u16."""
    with open(path, "wb") as fh:
        fh.write(EVENT_LOG_MAGIC)
        fh.write(struct.pack("<H", EVENT_LOG_VERSION))
        for t, ch, act in events:
            fh.write(_EVENT_RECORD.pack(t, _CH_ORDER[ch], act == "on"))


def read_event_log(path):
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != EVENT_LOG_MAGIC:
            raise ArtifactFormatError(f"bad magic {magic!r}")
        (version,) = struct.unpack("<H", fh.read(2))
        if version != EVENT_LOG_VERSION:
            raise ArtifactFormatError(f"unsupported version {version}")
        out = []
        while True:
            blob = fh.read(_EVENT_RECORD.size)
            if not blob:
                return out
            if len(blob) != _EVENT_RECORD.size:
                raise ArtifactFormatError("truncated event record")
            t, ch, act = _EVENT_RECORD.unpack(blob)
            if ch >= len(CHANNELS):
                raise ArtifactFormatError(f"unknown channel code {ch}")
            out.append((t, CHANNELS[ch], "on" if act else "off"))
