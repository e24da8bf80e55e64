"""Synthetic flight-data generator for desk-scale validation.

Healthy flights are smooth multi-phase profiles (taxi/climb/cruise/descent
trends), cross-channel couplings, band-limited noise, and a handful of
maneuvers — each maneuver followed, at a fixed lag, by an "echo" response in
one monitoring channel.  Fault classes inject class-specific local
deformations into designated monitoring channels; operational channels are
shared across classes.  One class displaces the maneuver echoes to a wrong
lag, which is invisible to any bounded-receptive-field statistic and thus
separates global from local analyzers.

Everything is driven by a single seeded generator in a fixed order, so a
given spec reproduces bit-identical datasets.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.ndimage import uniform_filter1d

from .schema import ANOMALOUS, HEALTHY, FlightSample, LabeledDataset, synth_schema

#: Library of fault deformation kinds, cycled when a spec asks for more
#: classes than it names.
FAULT_KINDS = ("plateau_drift", "spike_train", "coupled_oscillation", "phantom_echo")


@dataclass(frozen=True)
class FaultSignature:
    """How one fault class deforms the healthy signal.

    ``channels`` are monitoring-channel indices; ``amplitude`` scales the
    whole deformation field (0 reproduces the healthy generator exactly).
    """

    kind: str
    channels: tuple[int, ...]
    amplitude: float = 1.0


@dataclass
class SynthSpec:
    n_healthy: int
    fault_counts: tuple[int, ...]
    length: int = 512
    n_channels: int = 8
    seed: int = 0
    class_names: tuple[str, ...] | None = None
    signatures: tuple[FaultSignature, ...] | None = None
    noise_sigma: float = 0.2
    echo_lag: int = 48
    echo_amp: float = 0.9
    maneuver_amp: float = 1.6
    n_maneuvers: tuple[int, int] = (2, 4)  # inclusive range

    def __post_init__(self) -> None:
        self.fault_counts = tuple(int(c) for c in self.fault_counts)
        if self.n_healthy < 0 or any(c < 0 for c in self.fault_counts):
            raise ValueError("sample counts must be non-negative")
        if self.n_channels < 4:
            raise ValueError("need n_channels >= 4 for a monitoring/operational split")
        if self.length < 32:
            raise ValueError("length must be >= 32")
        if self.echo_lag < 2 or self.echo_lag > 0.2 * self.length:
            raise ValueError("echo_lag must lie in [2, 0.2 * length]")
        if self.n_maneuvers[0] < 1 or self.n_maneuvers[1] < self.n_maneuvers[0]:
            raise ValueError("bad maneuver count range")

    @property
    def n_fault_classes(self) -> int:
        return len(self.fault_counts)

    def resolved_class_names(self) -> tuple[str, ...]:
        if self.class_names is not None:
            if len(self.class_names) != self.n_fault_classes:
                raise ValueError("class_names length must match fault_counts length")
            return tuple(self.class_names)
        names = []
        for j in range(self.n_fault_classes):
            base = FAULT_KINDS[j % len(FAULT_KINDS)]
            suffix = "" if j < len(FAULT_KINDS) else f"_{j // len(FAULT_KINDS) + 1}"
            names.append(base + suffix)
        return tuple(names)

    def resolved_signatures(self) -> tuple[FaultSignature, ...]:
        n_mon = self.n_channels - 2
        if self.signatures is not None:
            if len(self.signatures) != self.n_fault_classes:
                raise ValueError("signatures length must match fault_counts length")
            for sig in self.signatures:
                if any(not (0 <= c < n_mon) for c in sig.channels):
                    raise ValueError(
                        f"signature {sig.kind!r} targets a non-monitoring channel; "
                        f"valid monitoring indices are 0..{n_mon - 1}"
                    )
            return self.signatures
        echo_ch = n_mon - 1
        out: list[FaultSignature] = []
        for j in range(self.n_fault_classes):
            kind = FAULT_KINDS[j % len(FAULT_KINDS)]
            if kind == "plateau_drift":
                chans: tuple[int, ...] = (j % max(1, echo_ch),)
            elif kind == "spike_train":
                chans = ((j + 1) % max(1, echo_ch),)
            elif kind == "coupled_oscillation":
                a = j % max(1, echo_ch)
                b = (j + 1) % max(1, echo_ch)
                chans = (a, b) if a != b else (a,)
            else:  # phantom_echo
                chans = (echo_ch,)
            out.append(FaultSignature(kind=kind, channels=chans, amplitude=1.0))
        return tuple(out)


# ---------------------------------------------------------------------------
# signal building blocks
# ---------------------------------------------------------------------------

def _band_noise(rng: np.random.Generator, length: int, sigma: float, window: int = 9) -> np.ndarray:
    white = rng.normal(0.0, 1.0, size=length)
    smooth = uniform_filter1d(white, size=window, mode="reflect")
    return smooth * (sigma * np.sqrt(window))


def _bump(length: int, center: float, width: float) -> np.ndarray:
    t = np.arange(length, dtype=np.float64)
    return np.exp(-0.5 * ((t - center) / width) ** 2)


def _trapezoid_profile(rng: np.random.Generator, length: int, cruise: float) -> np.ndarray:
    r1 = rng.uniform(0.12, 0.25)
    r2 = rng.uniform(0.70, 0.88)
    knots_x = np.array([0.0, r1, r2, 1.0]) * (length - 1)
    ground = rng.uniform(-0.05, 0.05)
    knots_y = np.array([ground, cruise, cruise * rng.uniform(0.95, 1.05), ground])
    prof = np.interp(np.arange(length, dtype=np.float64), knots_x, knots_y)
    return uniform_filter1d(prof, size=max(3, length // 24), mode="nearest")


def _draw_positions(
    rng: np.random.Generator, n: int, lo: int, hi: int, min_sep: int
) -> list[int]:
    """n integer positions in [lo, hi] pairwise separated by >= min_sep."""
    if hi < lo:
        raise ValueError("empty placement window; lower echo_lag or raise length")
    positions: list[int] = []
    for _ in range(200):
        cand = int(rng.integers(lo, hi + 1))
        if all(abs(cand - p) >= min_sep for p in positions):
            positions.append(cand)
            if len(positions) == n:
                break
    if len(positions) < n:
        # crowded window: fall back to an evenly spaced layout
        positions = list(np.linspace(lo, hi, n).astype(int))
    return sorted(positions)


# ---------------------------------------------------------------------------
# generator
# ---------------------------------------------------------------------------

class _FleetModel:
    """Per-dataset constants: couplings, baselines, channel roles."""

    def __init__(self, spec: SynthSpec, rng: np.random.Generator):
        self.spec = spec
        n_mon = spec.n_channels - 2
        self.n_mon = n_mon
        self.echo_channel = n_mon - 1
        self.coup_speed = rng.uniform(0.3, 0.9, size=n_mon)
        self.coup_alt = rng.uniform(0.1, 0.5, size=n_mon)
        self.baselines = rng.uniform(-0.5, 0.5, size=n_mon)
        self.bump_width = 4.0

    def healthy_values(self, rng: np.random.Generator) -> tuple[np.ndarray, list[int]]:
        """One healthy flight (L, D) plus its maneuver positions."""
        spec = self.spec
        L, lag = spec.length, spec.echo_lag
        p_speed = _trapezoid_profile(rng, L, cruise=rng.uniform(0.85, 1.15))
        p_alt = _trapezoid_profile(rng, L, cruise=rng.uniform(0.6, 1.0))

        n_m = int(rng.integers(spec.n_maneuvers[0], spec.n_maneuvers[1] + 1))
        lo = max(8, int(0.04 * L))
        hi = int(L - 4.2 * lag - 6 * self.bump_width)
        maneuvers = _draw_positions(rng, n_m, lo, hi, min_sep=max(10, int(4 * self.bump_width)))

        speed = p_speed + _band_noise(rng, L, spec.noise_sigma * 0.6)
        for tm in maneuvers:
            speed = speed + spec.maneuver_amp * _bump(L, tm, self.bump_width)
        alt = p_alt + _band_noise(rng, L, spec.noise_sigma * 0.6)

        mon = np.empty((L, self.n_mon), dtype=np.float64)
        for j in range(self.n_mon):
            level = self.baselines[j] + rng.normal(0.0, 0.05)
            mon[:, j] = (
                level
                + self.coup_speed[j] * p_speed
                + self.coup_alt[j] * p_alt
                + _band_noise(rng, L, spec.noise_sigma)
            )
        # time-locked echo response to each maneuver
        for tm in maneuvers:
            mon[:, self.echo_channel] += spec.echo_amp * _bump(L, tm + lag, self.bump_width)

        values = np.concatenate([mon, speed[:, None], alt[:, None]], axis=1)
        return values, maneuvers

    # -- fault deformation fields ------------------------------------------

    def deformation(
        self,
        sig: FaultSignature,
        rng: np.random.Generator,
        maneuvers: list[int],
    ) -> np.ndarray:
        """(L, n_mon) additive field implementing one fault signature."""
        spec = self.spec
        L = spec.length
        delta = np.zeros((L, self.n_mon), dtype=np.float64)
        if sig.kind == "plateau_drift":
            ch = sig.channels[0]
            span = int(rng.uniform(0.15, 0.30) * L)
            start = int(rng.integers(int(0.05 * L), L - span - int(0.05 * L)))
            t = np.arange(L, dtype=np.float64)
            rise = 6.0
            box = 1.0 / (1.0 + np.exp(-(t - start) / rise))
            box *= 1.0 / (1.0 + np.exp((t - (start + span)) / rise))
            sign = rng.choice((-1.0, 1.0))
            delta[:, ch] = sign * 5.0 * spec.noise_sigma * box
        elif sig.kind == "spike_train":
            ch = sig.channels[0]
            n_sp = int(rng.integers(8, 13))
            pos = _draw_positions(rng, n_sp, int(0.05 * L), int(0.95 * L), min_sep=6)
            tri = np.array([0.5, 1.0, 0.5])
            for p in pos:
                s = rng.choice((-1.0, 1.0))
                lo = max(0, p - 1)
                hi = min(L, p + 2)
                delta[lo:hi, ch] += s * 6.0 * spec.noise_sigma * tri[: hi - lo]
        elif sig.kind == "coupled_oscillation":
            span = int(rng.uniform(0.20, 0.35) * L)
            start = int(rng.integers(int(0.05 * L), L - span - int(0.05 * L)))
            f = rng.uniform(0.055, 0.095)
            phase = rng.uniform(0.0, 2 * np.pi)
            t = np.arange(span, dtype=np.float64)
            wave = np.sin(2 * np.pi * f * t + phase)
            taper = np.minimum(1.0, np.minimum(t, span - 1 - t) / 12.0)
            for ch in sig.channels:
                delta[start : start + span, ch] += 4.0 * spec.noise_sigma * wave * taper
        elif sig.kind == "phantom_echo":
            # displace every legit echo to a wrong lag: same count, same
            # shape, wrong timing relative to the maneuver that caused it
            ch = sig.channels[0]
            lag = spec.echo_lag
            for tm in maneuvers:
                phantom = self._phantom_lag(rng, tm, maneuvers)
                delta[:, ch] += spec.echo_amp * (
                    _bump(L, tm + phantom, self.bump_width) - _bump(L, tm + lag, self.bump_width)
                )
        else:
            raise ValueError(f"unknown fault kind {sig.kind!r}")
        return sig.amplitude * delta

    def _phantom_lag(self, rng: np.random.Generator, tm: int, maneuvers: list[int]) -> int:
        """A displaced lag that does not mimic any legit maneuver+lag position."""
        spec = self.spec
        lag = spec.echo_lag
        legit = [m + lag for m in maneuvers]
        for _ in range(20):
            cand = int(rng.integers(int(2.5 * lag), int(4.0 * lag) + 1))
            spot = tm + cand
            if all(abs(spot - p) >= int(0.25 * lag) + 3 for p in legit):
                return cand
        return int(3.2 * lag)


def synth_generate(spec: SynthSpec) -> LabeledDataset:
    """Generate a labeled synthetic dataset, deterministic given spec.seed."""
    rng = np.random.default_rng(spec.seed)
    fleet = _FleetModel(spec, rng)
    schema = synth_schema(spec.n_channels)
    names = spec.resolved_class_names()
    signatures = spec.resolved_signatures()

    samples: list[FlightSample] = []
    for i in range(spec.n_healthy):
        values, _ = fleet.healthy_values(rng)
        samples.append(
            FlightSample(
                flight_id=f"syn-h-{i:04d}",
                values=values,
                missing_mask=np.zeros(values.shape, dtype=bool),
                ad_label=HEALTHY,
            )
        )
    n_mon = spec.n_channels - 2
    for j, (count, sig) in enumerate(zip(spec.fault_counts, signatures)):
        for i in range(count):
            values, maneuvers = fleet.healthy_values(rng)
            delta = fleet.deformation(sig, rng, maneuvers)
            values[:, :n_mon] += delta
            samples.append(
                FlightSample(
                    flight_id=f"syn-c{j + 1}-{i:04d}",
                    values=values,
                    missing_mask=np.zeros(values.shape, dtype=bool),
                    ad_label=ANOMALOUS,
                    fc_label=j + 1,
                    class_name=names[j],
                )
            )
    return LabeledDataset(samples, schema, names)
