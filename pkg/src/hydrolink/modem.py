"""Superimposed-pilot BPSK packets and a least-squares CIR estimator.

Each symbol carries a pilot bit in its real part and a coded, interleaved
data bit in its imaginary part. Symbols are shaped by a root-raised-cosine
filter at ``sps`` samples per symbol.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.linalg import cho_factor, cho_solve, LinAlgError
from scipy.signal import fftconvolve

from .channelsim import CirSnapshot
from .errors import CapacityError, DomainError, SingularSystemError

GENERATORS = (0o133, 0o171, 0o165)
CONSTRAINT = 7


# convolutional code


def _parity_table():
    states = np.arange(1 << CONSTRAINT)
    out = np.zeros((states.size, len(GENERATORS)), dtype=np.uint8)
    for j, g in enumerate(GENERATORS):
        v = states & g
        bits = np.zeros_like(v)
        while np.any(v):
            bits ^= v & 1
            v >>= 1
        out[:, j] = bits
    return out


_PARITY = _parity_table()


def conv_encode(bits) -> np.ndarray:
    """Rate-1/3, K=7 encoder; appends K-1 zero tail bits."""
    bits = np.asarray(bits, dtype=np.uint8).reshape(-1)
    if bits.size == 0:
        raise DomainError("cannot encode an empty bit vector")
    u = np.concatenate([bits, np.zeros(CONSTRAINT - 1, dtype=np.uint8)])
    reg = 0
    regs = np.empty(u.size, dtype=np.int64)
    for i, b in enumerate(u):
        reg = ((reg << 1) | int(b)) & ((1 << CONSTRAINT) - 1)
        regs[i] = reg
    return _PARITY[regs].reshape(-1)


def coded_length(n_bits: int) -> int:
    return 3 * (n_bits + CONSTRAINT - 1)


def viterbi_decode(llrs) -> np.ndarray:
    """Soft-decision Viterbi decoder for :func:`conv_encode`.

    ``llrs`` are per coded bit, positive meaning bit 0 is more likely. Hard
    bits may be passed as ``1 - 2 * bits``.
    """
    llrs = np.asarray(llrs, dtype=float).reshape(-1)
    if llrs.size == 0 or llrs.size % 3:
        raise DomainError(f"coded length {llrs.size} is not a positive multiple of 3")
    n = llrs.size // 3
    if n < CONSTRAINT - 1 + 1:
        raise DomainError("coded block shorter than the code tail")
    nstates = 1 << (CONSTRAINT - 1)
    s = np.arange(nstates)
    # transition from state s with input b: register = (s << 1) | b
    regs = np.stack([(s << 1) | 0, (s << 1) | 1], axis=1)           # (S, 2)
    nxt = regs & (nstates - 1)
    sym = 1.0 - 2.0 * _PARITY[regs]                                   # (S, 2, 3)
    metric = np.full(nstates, -np.inf)
    metric[0] = 0.0
    back = np.empty((n, nstates), dtype=np.int64)
    r = llrs.reshape(n, 3)
    flat_next = nxt.reshape(-1)
    for t in range(n):
        cand = (metric[:, None] + sym @ r[t]).reshape(-1)             # (2S,)
        order = np.lexsort((-cand, flat_next))
        first = np.ones(order.size, dtype=bool)
        first[1:] = flat_next[order][1:] != flat_next[order][:-1]
        best = order[first]
        new = np.full(nstates, -np.inf)
        new[flat_next[best]] = cand[best]
        back[t, flat_next[best]] = best
        metric = new
    state = 0
    out = np.empty(n, dtype=np.uint8)
    for t in range(n - 1, -1, -1):
        k = back[t, state]
        out[t] = k & 1
        state = k >> 1
    return out[: n - (CONSTRAINT - 1)]


# pulse shaping


def rrc_taps(rolloff: float, span: int, sps: int) -> np.ndarray:
    """Unit-energy root-raised-cosine impulse response over ``span`` symbols."""
    if not 0 < rolloff < 1:
        raise DomainError("rolloff must lie in (0, 1)")
    t = np.arange(-span * sps // 2, span * sps // 2 + 1) / sps
    b = rolloff
    h = np.empty(t.size)
    for i, ti in enumerate(t):
        if abs(ti) < 1e-12:
            h[i] = 1.0 + b * (4.0 / np.pi - 1.0)
        elif abs(abs(4.0 * b * ti) - 1.0) < 1e-9:
            h[i] = b / np.sqrt(2.0) * ((1 + 2 / np.pi) * np.sin(np.pi / (4 * b))
                                       + (1 - 2 / np.pi) * np.cos(np.pi / (4 * b)))
        else:
            num = np.sin(np.pi * ti * (1 - b)) + 4 * b * ti * np.cos(np.pi * ti * (1 + b))
            h[i] = num / (np.pi * ti * (1 - (4 * b * ti) ** 2))
    return h / np.sqrt(np.sum(h * h))


# packets


@dataclass
class PacketSpec:
    n_symbols: int = 600
    symbol_rate: float = 6000.0
    sample_rate: float = 12000.0
    rolloff: float = 0.2
    span: int = 40
    carrier: float = 32000.0
    pilot_seed: int = 1
    interleaver_seed: int = 2
    pilot: Optional[np.ndarray] = field(default=None, repr=False)

    def __post_init__(self):
        if not 0 < self.rolloff < 1:
            raise DomainError("rolloff must lie in (0, 1)")
        sps = self.sample_rate / self.symbol_rate
        if abs(sps - round(sps)) > 1e-9 or sps < 1:
            raise DomainError("sample rate must be an integer multiple of the symbol rate")
        if self.pilot is None:
            rng = np.random.default_rng(self.pilot_seed)
            self.pilot = 1.0 - 2.0 * rng.integers(0, 2, self.n_symbols)
        self.pilot = np.asarray(self.pilot, dtype=float)
        if self.pilot.size != self.n_symbols or not np.all(np.abs(self.pilot) == 1):
            raise DomainError("pilot must be a +-1 vector of length n_symbols")

    @property
    def sps(self) -> int:
        return int(round(self.sample_rate / self.symbol_rate))

    @property
    def duration(self) -> float:
        return self.n_symbols / self.symbol_rate

    @property
    def capacity(self) -> int:
        """Data bits per packet."""
        return self.n_symbols // 3 - (CONSTRAINT - 1)

    def interleaver(self) -> np.ndarray:
        return np.random.default_rng(self.interleaver_seed).permutation(self.n_symbols)

    def shaping(self) -> np.ndarray:
        return rrc_taps(self.rolloff, self.span, self.sps)


@dataclass
class Packet:
    spec: PacketSpec
    bits: np.ndarray
    symbols: np.ndarray
    samples: np.ndarray

    @property
    def delay(self) -> int:
        """Samples from the packet start to the first symbol peak."""
        return self.spec.span * self.spec.sps // 2

    def passband(self, rate: Optional[float] = None) -> np.ndarray:
        """Real passband waveform ``Re{x(t) e^{j 2 pi f_c t}}`` at ``rate``.

        The baseband is resampled by FFT interpolation; ``rate`` must exceed
        twice the carrier plus half the bandwidth.
        """
        from scipy.signal import resample
        rate = rate or 8 * self.spec.carrier
        up = int(round(rate / self.spec.sample_rate))
        x = resample(self.samples, self.samples.size * up)
        t = np.arange(x.size) / (self.spec.sample_rate * up)
        return np.real(x * np.exp(2j * np.pi * self.spec.carrier * t))


def _map_symbols(spec: PacketSpec, coded: np.ndarray) -> np.ndarray:
    data = np.zeros(spec.n_symbols, dtype=np.uint8)
    data[: coded.size] = coded
    inter = spec.interleaver()
    d = np.empty(spec.n_symbols)
    d[inter] = 1.0 - 2.0 * data
    return spec.pilot + 1j * d


def shape_symbols(spec: PacketSpec, symbols) -> np.ndarray:
    up = np.zeros(len(symbols) * spec.sps, dtype=complex)
    up[:: spec.sps] = symbols
    return fftconvolve(up, spec.shaping())


def build_packet(spec: PacketSpec, bits) -> Packet:
    """Encode, interleave, map and shape one packet of data bits."""
    bits = np.asarray(bits, dtype=np.uint8).reshape(-1)
    if bits.size != spec.capacity:
        raise CapacityError(f"packet carries {spec.capacity} bits, got {bits.size}")
    coded = conv_encode(bits)
    symbols = _map_symbols(spec, coded)
    return Packet(spec, bits, symbols, shape_symbols(spec, symbols))


def matched_filter(spec: PacketSpec, received, n_symbols: Optional[int] = None,
                   offset: int = 0) -> np.ndarray:
    """Matched-filter and sample at the symbol rate starting from ``offset``."""
    n = n_symbols or spec.n_symbols
    h = spec.shaping()
    y = fftconvolve(np.asarray(received, dtype=complex), h[::-1].conj())
    start = offset + h.size - 1
    return y[start: start + n * spec.sps: spec.sps]


def demodulate(spec: PacketSpec, symbols, noise_var: float = 1.0) -> np.ndarray:
    """Data bits from equalized symbols (imaginary part), deinterleaved and decoded."""
    inter = spec.interleaver()
    llr = 2.0 * np.imag(np.asarray(symbols))[inter] / max(noise_var, 1e-12)
    n = coded_length(spec.capacity)
    return viterbi_decode(llr[:n])


def _normal_solve(X: np.ndarray, y: np.ndarray, loading: float = 1e-6,
                  refine: int = 2) -> np.ndarray:
    """Least-squares ``h`` for ``y ~ X h`` via loaded normal equations.

    The loading is ``loading * trace / L``. ``refine`` residual-correction
    passes reuse the Cholesky factor and shrink the loading bias
    geometrically, so a noiseless in-model channel is recovered to solver
    precision.
    """
    taps = X.shape[1]
    R = X.conj().T @ X
    b = X.conj().T @ y
    tr = np.real(np.trace(R))
    if tr <= 0:
        raise SingularSystemError("reference waveform is identically zero")
    try:
        factor = cho_factor(R + loading * tr / taps * np.eye(taps), lower=True)
    except LinAlgError as exc:
        raise SingularSystemError(str(exc)) from exc
    h = cho_solve(factor, b)
    for _ in range(refine):
        h = h + cho_solve(factor, b - R @ h)
    return h


def _cascade_regressor(spec: PacketSpec, symbols, n_out: int, taps: int) -> np.ndarray:
    """Symbol-rate regression matrix ``X[n, k] = x(n - k)``.

    ``x`` is the symbol stream through the transmit and matched filters,
    sampled at symbol instants, so residual filter ISI is part of the model.
    """
    h = spec.shaping()
    full = fftconvolve(shape_symbols(spec, symbols), h[::-1].conj())
    centre = h.size - 1
    n = np.arange(n_out)[:, None] - np.arange(taps)[None, :]
    idx = centre + spec.sps * n
    ok = (idx >= 0) & (idx < full.size)
    return np.where(ok, full[np.clip(idx, 0, full.size - 1)], 0)


def _equalize(r: np.ndarray, g: np.ndarray, n: int, loading: float = 1e-3) -> np.ndarray:
    """Real data symbols ``d`` from ``r ~ conv(g, j d)`` by widely-linear least squares.

    ``d`` is real, so the real and imaginary parts of ``r`` are stacked and
    solved jointly; this resolves the ISI a plain matched combiner leaves in.
    """
    m = r.size
    G = np.zeros((m, n), dtype=complex)
    for k, gk in enumerate(g):
        rows = np.arange(k, min(m, k + n))
        G[rows, rows - k] = 1j * gk
    A = np.vstack([G.real, G.imag])
    b = np.concatenate([r.real, r.imag])
    scale = float(np.sum(np.abs(g) ** 2)) or 1.0
    return cho_solve(cho_factor(A.T @ A + loading * scale * np.eye(n), lower=True), A.T @ b)


def estimate_cir(received, spec: PacketSpec, taps: int, time: float = 0.0,
                 decision_directed: bool = True, delay_offset: float = 0.0,
                 passes: int = 2) -> CirSnapshot:
    """Estimate a ``taps``-long symbol-spaced CIR from one received packet segment.

    The segment starts at the packet start and must cover the packet plus
    the channel spread. The received samples are matched-filtered and taken
    at symbol instants; a least-squares FIR then maps the known pilot stream,
    passed through the same filter cascade, onto them. With
    ``decision_directed`` the data are equalized against the current
    estimate, decoded, re-encoded, and the fit is repeated on the full
    symbols, ``passes`` times. A pass is kept only if it lowers the fit
    residual.
    """
    y = np.asarray(received, dtype=complex)
    n_out = spec.n_symbols + taps
    need = (n_out + spec.span) * spec.sps
    if y.size < need:
        raise DomainError(f"segment of {y.size} samples is shorter than {need}")
    z = matched_filter(spec, y[:need], n_symbols=n_out)
    Xp = _cascade_regressor(spec, spec.pilot.astype(complex), n_out, taps)
    g = _normal_solve(Xp, z)
    if not decision_directed:
        return CirSnapshot(time, g, spec.symbol_rate / taps, spec.symbol_rate, delay_offset)
    best = np.inf
    for _ in range(passes):
        d = _equalize(z - Xp @ g, g, spec.n_symbols)
        bits = demodulate(spec, 1j * d)
        X = _cascade_regressor(spec, build_packet(spec, bits).symbols, n_out, taps)
        g_new = _normal_solve(X, z)
        res = float(np.sum(np.abs(X @ g_new - z) ** 2))
        if res >= best:
            break
        g, best = g_new, res
    return CirSnapshot(time, g, spec.symbol_rate / taps, spec.symbol_rate, delay_offset)


def random_bits(spec: PacketSpec, rng: np.random.Generator) -> np.ndarray:
    return rng.integers(0, 2, spec.capacity).astype(np.uint8)
