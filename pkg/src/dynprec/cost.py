"""Analytic time/energy model of the SoC.

Per frame the platform runs four stages in sequence: feature extraction and
iVector (front-end, fixed per-frame constants), acoustic-model evaluation on
the DNN accelerator, and the beam search on the search accelerator.  Every
component draws static power for the duration of every stage.

The AM stage is memory bound: time is the DRAM transfer time of the weights
(plus a small amount of other traffic) at the sustained bandwidth.  A half
precision frame moves half the weight bytes and runs twice the MACs per
cycle, so both its transfer and compute time halve.

Default constants are solved by :func:`calibrate` from measured breakdown
shares; see ``docs/calibration.md``.  Ledgers store integer femtojoules and
picoseconds so that totals are exactly additive in any order.
"""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

from .arith import PrecisionMode

COMPONENTS = ("dram", "dnn", "search", "cpu")
STAGES = ("feature", "ivector", "am", "beam")
FRONTEND = ("feature", "ivector")

FJ = 1e15  # femtojoules per joule
PS = 1e12  # picoseconds per second


@dataclass(frozen=True)
class CalibrationTargets:
    """Breakdown shares of an all-base run that the defaults reproduce."""

    energy_per_frame: float = 0.7e-3  # J
    am_energy_share: float = 0.683
    ivector_energy_share: float = 0.289
    beam_energy_share: float = 0.015  # assumed split of the remaining 2.8%
    am_time_share: float = 0.82
    frontend_time_share: float = 0.148
    beam_time_share: float = 0.032
    ivector_time_fraction: float = 0.5  # of front-end time
    dram_share_of_am_energy: float = 0.85
    dram_background_fraction: float = 0.10  # of DRAM energy during AM
    # remaining 15% of AM energy, by component
    cpu_share_of_am_energy: float = 0.07
    dnn_dynamic_share_of_am_energy: float = 0.04
    dnn_static_share_of_am_energy: float = 0.02
    search_static_share_of_am_energy: float = 0.02
    beam_fixed_fraction: float = 0.05  # of beam time independent of tokens
    nominal_tokens_per_frame: float = 80.0

    def __post_init__(self):
        am_rest = (self.cpu_share_of_am_energy + self.dnn_dynamic_share_of_am_energy
                   + self.dnn_static_share_of_am_energy + self.search_static_share_of_am_energy)
        if abs(self.dram_share_of_am_energy + am_rest - 1.0) > 1e-9:
            raise ValueError("AM component shares must sum to 1")
        if self.am_energy_share + self.ivector_energy_share + self.beam_energy_share >= 1.0:
            raise ValueError("energy shares leave nothing for feature extraction")
        if abs(self.am_time_share + self.frontend_time_share + self.beam_time_share - 1.0) > 1e-9:
            raise ValueError("time shares must sum to 1")
        if self.nominal_tokens_per_frame <= 0:
            raise ValueError("nominal_tokens_per_frame must be > 0")


@dataclass(frozen=True)
class HwConfig:
    # DRAM
    dram_bandwidth: float = 16e9  # B/s peak
    dram_efficiency: float = 0.85  # sustained fraction of peak
    dram_read_energy_per_byte: float = 0.0  # J/B
    dram_write_energy_per_byte: float = 0.0
    dram_static_power: float = 0.0  # W, background
    # DNN accelerator
    dnn_freq: float = 55e6
    nfu_macs_per_cycle: int = 16 * 16  # base mode; half mode is 2x
    dnn_energy_per_cycle: float = 0.0
    dnn_static_power: float = 0.0
    # beam-search accelerator
    bs_freq: float = 600e6
    search_static_power: float = 0.0
    beam_cycles_per_token: float = 0.0
    beam_energy_per_token: float = 0.0
    beam_fixed_cycles: float = 0.0
    # CPU (idle while accelerators run)
    cpu_idle_power: float = 0.0
    # front-end constants (all-inclusive per frame)
    feature_time_per_frame: float = 0.0
    feature_energy_per_frame: float = 0.0
    ivector_time_per_frame: float = 0.0
    ivector_energy_per_frame: float = 0.0
    # acoustic model traffic
    model_bytes: int = 16 * 1024 * 1024  # base-precision weight bytes per frame
    other_traffic_fraction: float = 0.01  # non-weight share of AM DRAM traffic

    def __post_init__(self):
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if v < 0:
                raise ValueError(f"{f.name} must be non-negative")
        for name in ("dram_bandwidth", "dram_efficiency", "dnn_freq", "bs_freq", "nfu_macs_per_cycle"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if not self.other_traffic_fraction < 1:
            raise ValueError("other_traffic_fraction must be < 1")

    @property
    def sustained_bandwidth(self) -> float:
        return self.dram_bandwidth * self.dram_efficiency

    def macs_per_cycle(self, mode: PrecisionMode) -> int:
        return self.nfu_macs_per_cycle * (2 if mode is PrecisionMode.HALF else 1)

    @property
    def static_power(self) -> float:
        return self.dram_static_power + self.dnn_static_power + self.search_static_power + self.cpu_idle_power

    @classmethod
    def default(cls) -> "HwConfig":
        return calibrate(CalibrationTargets())

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict, base: "HwConfig | None" = None) -> "HwConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown hardware keys: {sorted(unknown)}")
        return dataclasses.replace(base or cls.default(), **d)


def calibrate(targets: CalibrationTargets, base: HwConfig | None = None) -> HwConfig:
    """Solve the free constants of ``base`` so an all-base frame with
    ``nominal_tokens_per_frame`` tokens reproduces ``targets``."""
    hw = base or HwConfig()
    t = targets
    weight = float(hw.model_bytes)
    other = weight * hw.other_traffic_fraction / (1.0 - hw.other_traffic_fraction)
    t_am = (weight + other) / hw.sustained_bandwidth
    t_total = t_am / t.am_time_share
    t_beam = t.beam_time_share * t_total
    e_total = t.energy_per_frame
    e_am = t.am_energy_share * e_total

    e_dram = t.dram_share_of_am_energy * e_am
    dram_static = t.dram_background_fraction * e_dram / t_am
    # reads: weights + half the other traffic; writes: the other half, 10% dearer
    write_ratio = 1.1
    read_bytes = weight + other / 2
    write_bytes = other / 2
    e_read = (1 - t.dram_background_fraction) * e_dram / (read_bytes + write_ratio * write_bytes)
    cycles = weight / hw.nfu_macs_per_cycle  # one MAC per weight per frame
    static_power_sum = (dram_static + t.cpu_share_of_am_energy * e_am / t_am
                        + t.dnn_static_share_of_am_energy * e_am / t_am
                        + t.search_static_share_of_am_energy * e_am / t_am)

    e_beam = t.beam_energy_share * e_total
    fixed_cycles = t.beam_fixed_fraction * t_beam * hw.bs_freq
    per_token_cycles = (1 - t.beam_fixed_fraction) * t_beam * hw.bs_freq / t.nominal_tokens_per_frame
    per_token_energy = (e_beam - static_power_sum * t_beam) / t.nominal_tokens_per_frame
    if per_token_energy < 0:
        raise ValueError("beam energy share is below the static floor of the beam stage")

    t_fe = t.frontend_time_share * t_total
    e_feature = (1 - t.am_energy_share - t.ivector_energy_share - t.beam_energy_share) * e_total
    return dataclasses.replace(
        hw,
        dram_read_energy_per_byte=e_read,
        dram_write_energy_per_byte=write_ratio * e_read,
        dram_static_power=dram_static,
        dnn_energy_per_cycle=t.dnn_dynamic_share_of_am_energy * e_am / cycles,
        dnn_static_power=t.dnn_static_share_of_am_energy * e_am / t_am,
        search_static_power=t.search_static_share_of_am_energy * e_am / t_am,
        cpu_idle_power=t.cpu_share_of_am_energy * e_am / t_am,
        beam_cycles_per_token=per_token_cycles,
        beam_energy_per_token=per_token_energy,
        beam_fixed_cycles=fixed_cycles,
        feature_time_per_frame=(1 - t.ivector_time_fraction) * t_fe,
        feature_energy_per_frame=e_feature,
        ivector_time_per_frame=t.ivector_time_fraction * t_fe,
        ivector_energy_per_frame=t.ivector_energy_share * e_total,
    )


@dataclass(frozen=True)
class StageCost:
    time: float  # s
    energy: dict  # component -> J
    weight_bytes: float = 0.0
    other_bytes: float = 0.0

    @property
    def total_energy(self) -> float:
        return sum(self.energy.values())


def _static(hw: HwConfig, time: float) -> dict:
    return {
        "dram": hw.dram_static_power * time,
        "dnn": hw.dnn_static_power * time,
        "search": hw.search_static_power * time,
        "cpu": hw.cpu_idle_power * time,
    }


def am_frame_cost(model_bytes_base: float, mode: PrecisionMode, hw: HwConfig) -> StageCost:
    """One acoustic-model evaluation at ``mode``."""
    if model_bytes_base < 0:
        raise ValueError("model size must be non-negative")
    other = model_bytes_base * hw.other_traffic_fraction / (1.0 - hw.other_traffic_fraction)
    weight = model_bytes_base if mode is PrecisionMode.BASE else model_bytes_base / 2
    cycles = model_bytes_base / hw.macs_per_cycle(mode)  # MACs = weights
    transfer = (weight + other) / hw.sustained_bandwidth
    compute = cycles / hw.dnn_freq
    time = max(transfer, compute)
    energy = _static(hw, time)
    energy["dram"] += (weight + other / 2) * hw.dram_read_energy_per_byte \
        + (other / 2) * hw.dram_write_energy_per_byte
    energy["dnn"] += cycles * hw.dnn_energy_per_cycle
    return StageCost(time, energy, weight, other)


def am_compute_time(model_bytes_base: float, mode: PrecisionMode, hw: HwConfig) -> float:
    return model_bytes_base / hw.macs_per_cycle(mode) / hw.dnn_freq


def beam_frame_cost(tokens: int, hw: HwConfig) -> StageCost:
    """Search step that leaves ``tokens`` active tokens; linear in tokens."""
    if tokens < 0:
        raise ValueError("token count must be non-negative")
    time = (hw.beam_fixed_cycles + hw.beam_cycles_per_token * tokens) / hw.bs_freq
    energy = _static(hw, time)
    energy["search"] += hw.beam_energy_per_token * tokens
    return StageCost(time, energy)


def frontend_frame_cost(hw: HwConfig) -> dict[str, StageCost]:
    return {
        "feature": StageCost(hw.feature_time_per_frame, {"cpu": hw.feature_energy_per_frame}),
        "ivector": StageCost(hw.ivector_time_per_frame, {"cpu": hw.ivector_energy_per_frame}),
    }


def _fj(x: float) -> int:
    return int(round(x * FJ))


def _ps(x: float) -> int:
    return int(round(x * PS))


@dataclass
class CostLedger:
    """Exact integer accounting: energy in fJ per (stage, component), time in
    ps per stage, DRAM bytes split into weights and other traffic."""

    energy_fj: dict = field(default_factory=lambda: {(s, c): 0 for s in STAGES for c in COMPONENTS})
    time_ps: dict = field(default_factory=lambda: {s: 0 for s in STAGES})
    weight_bytes: int = 0
    other_bytes: int = 0
    frames: int = 0
    half_frames: int = 0

    def add(self, stage: str, cost: StageCost) -> None:
        self.time_ps[stage] += _ps(cost.time)
        for comp, e in cost.energy.items():
            self.energy_fj[(stage, comp)] += _fj(e)
        self.weight_bytes += int(round(cost.weight_bytes))
        self.other_bytes += int(round(cost.other_bytes))

    def add_frame(self, mode: PrecisionMode, tokens: int, hw: HwConfig,
                  model_bytes: float | None = None) -> None:
        for stage, cost in frontend_frame_cost(hw).items():
            self.add(stage, cost)
        self.add("am", am_frame_cost(hw.model_bytes if model_bytes is None else model_bytes, mode, hw))
        self.add("beam", beam_frame_cost(tokens, hw))
        self.frames += 1
        self.half_frames += mode is PrecisionMode.HALF

    def merge(self, other: "CostLedger") -> "CostLedger":
        out = CostLedger()
        for k in out.energy_fj:
            out.energy_fj[k] = self.energy_fj[k] + other.energy_fj[k]
        for k in out.time_ps:
            out.time_ps[k] = self.time_ps[k] + other.time_ps[k]
        out.weight_bytes = self.weight_bytes + other.weight_bytes
        out.other_bytes = self.other_bytes + other.other_bytes
        out.frames = self.frames + other.frames
        out.half_frames = self.half_frames + other.half_frames
        return out

    __add__ = merge

    def __eq__(self, other) -> bool:
        if not isinstance(other, CostLedger):
            return NotImplemented
        return dataclasses.astuple(self) == dataclasses.astuple(other)

    # --- rollups (exact integers) ---
    def stage_energy_fj(self, stage: str) -> int:
        return sum(self.energy_fj[(stage, c)] for c in COMPONENTS)

    def component_energy_fj(self, comp: str, stages=STAGES) -> int:
        return sum(self.energy_fj[(s, comp)] for s in stages)

    @property
    def total_energy_fj(self) -> int:
        return sum(self.energy_fj.values())

    @property
    def total_time_ps(self) -> int:
        return sum(self.time_ps.values())

    # --- float views ---
    def stage_energy(self, stage: str) -> float:
        return self.stage_energy_fj(stage) / FJ

    def stage_time(self, stage: str) -> float:
        return self.time_ps[stage] / PS

    @property
    def total_energy(self) -> float:
        return self.total_energy_fj / FJ

    @property
    def total_time(self) -> float:
        return self.total_time_ps / PS

    @property
    def half_ratio(self) -> float:
        return self.half_frames / self.frames if self.frames else 0.0

    def shares(self) -> dict[str, float]:
        """Breakdown shares in the form the calibration targets use."""
        e, t = self.total_energy_fj, self.total_time_ps
        am_e = self.stage_energy_fj("am")
        return {
            "am_energy": am_e / e,
            "ivector_energy": self.stage_energy_fj("ivector") / e,
            "feature_energy": self.stage_energy_fj("feature") / e,
            "beam_energy": self.stage_energy_fj("beam") / e,
            "am_time": self.time_ps["am"] / t,
            "frontend_time": (self.time_ps["feature"] + self.time_ps["ivector"]) / t,
            "beam_time": self.time_ps["beam"] / t,
            "dram_within_am": self.energy_fj[("am", "dram")] / am_e,
        }

    def to_row(self) -> dict:
        row = {"frames": self.frames, "half_frames": self.half_frames,
               "weight_bytes": self.weight_bytes, "other_bytes": self.other_bytes}
        for s in STAGES:
            row[f"time_ps_{s}"] = self.time_ps[s]
        for s in STAGES:
            for c in COMPONENTS:
                row[f"energy_fj_{s}_{c}"] = self.energy_fj[(s, c)]
        return row

    @classmethod
    def from_row(cls, row: dict) -> "CostLedger":
        led = cls()
        led.frames = int(row["frames"])
        led.half_frames = int(row["half_frames"])
        led.weight_bytes = int(row["weight_bytes"])
        led.other_bytes = int(row["other_bytes"])
        for s in STAGES:
            led.time_ps[s] = int(row[f"time_ps_{s}"])
            for c in COMPONENTS:
                led.energy_fj[(s, c)] = int(row[f"energy_fj_{s}_{c}"])
        return led


def utterance_cost(frames) -> CostLedger:
    """Ledger for an iterable of ``(mode, tokens, hw)`` frame entries."""
    led = CostLedger()
    for mode, tokens, hw in frames:
        led.add_frame(mode, tokens, hw)
    return led


def sum_ledgers(ledgers) -> CostLedger:
    total = CostLedger()
    for led in ledgers:
        total = total + led
    return total


def saving(base: float, new: float) -> float:
    return 1.0 - new / base if base else 0.0


@dataclass
class Rollup:
    """Baseline-vs-technique comparison of two sets of utterance ledgers."""

    baseline: CostLedger
    technique: CostLedger
    am_energy_saving: float
    am_time_saving: float
    sys_energy_saving: float
    sys_time_saving: float
    best: str | None = None
    worst: str | None = None
    per_utterance: dict = field(default_factory=dict)  # name -> (half_ratio, am_e_sav, am_t_sav, sys_e, sys_t)

    def as_dict(self) -> dict:
        return {
            "half_ratio": self.technique.half_ratio,
            "am_energy_saving": self.am_energy_saving,
            "am_time_saving": self.am_time_saving,
            "sys_energy_saving": self.sys_energy_saving,
            "sys_time_saving": self.sys_time_saving,
            "baseline_energy_per_frame": self.baseline.total_energy / max(self.baseline.frames, 1),
            "technique_energy_per_frame": self.technique.total_energy / max(self.technique.frames, 1),
            "best_utterance": self.best,
            "worst_utterance": self.worst,
        }


def _savings(b: CostLedger, t: CostLedger):
    return (saving(b.stage_energy_fj("am"), t.stage_energy_fj("am")),
            saving(b.time_ps["am"], t.time_ps["am"]),
            saving(b.total_energy_fj, t.total_energy_fj),
            saving(b.total_time_ps, t.total_time_ps))


def system_rollup(baseline: dict[str, CostLedger], technique: dict[str, CostLedger]) -> Rollup:
    """Corpus totals and savings; best/worst utterance by half-frame share."""
    names = [n for n in technique if n in baseline]
    b_tot = sum_ledgers(baseline[n] for n in names)
    t_tot = sum_ledgers(technique[n] for n in names)
    per = {n: (technique[n].half_ratio, *_savings(baseline[n], technique[n])) for n in names}
    best = max(names, key=lambda n: (per[n][0], n)) if names else None
    worst = min(names, key=lambda n: (per[n][0], n)) if names else None
    return Rollup(b_tot, t_tot, *_savings(b_tot, t_tot), best, worst, per)


def hw_from_json(data) -> HwConfig:
    """HwConfig keys, optionally with a ``"targets"`` object of
    CalibrationTargets keys to re-solve the derived constants from."""
    if not isinstance(data, dict):
        raise ValueError("calibration data must be a JSON object")
    data = dict(data)
    targets = data.pop("targets", None)
    if targets is None:
        return HwConfig.from_dict(data)
    try:
        return calibrate(CalibrationTargets(**targets), base=HwConfig(**data))
    except TypeError as exc:
        raise ValueError(f"bad calibration keys: {exc}") from None


def load_hw(path) -> HwConfig:
    return hw_from_json(json.loads(Path(path).read_text()))


def save_hw(path, hw: HwConfig, targets: CalibrationTargets | None = None) -> None:
    data = hw.to_dict()
    if targets is not None:
        data["targets"] = dataclasses.asdict(targets)
    Path(path).write_text(json.dumps(data, indent=2, sort_keys=True) + "\n")
