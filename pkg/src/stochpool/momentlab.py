"""Monte-Carlo harness for second-moment consistency checks.

The lab reproduces the simulation protocol behind the library's design
claims: draw standard-normal feature tensors, push them through an operator
in both phases, and tabulate the second moments of the pooled outputs with
standard errors across trials.

Sweeps stream sample-by-sample so the largest configurations never hold a
full (64, 256, 256, 256) tensor in memory, and every trial is a pure
function of (config, indices), so trials can run across processes without
changing any reported value: aggregation is a fold in trial order.

Within a trial the scaled and unscaled train rows share draws (the unscaled
output is exactly the scaled one divided by sqrt(p)), and in the keep-prob
sweep every p reuses the trial's input tensor with its own fresh mask.  Both
choices are plain common-random-numbers: each row stays an unbiased
Monte-Carlo estimate of its operator.
"""

from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidConfigError
from .pooling import Phase, dropout, sap_forward, stochastic_subsample, zeiler_stochastic_pool
from .rng import RngStream, sample_normals
from .tensor import sample_gaussian, second_moment

__all__ = [
    "DEFAULT_SIDES",
    "DEFAULT_PROBS",
    "SweepConfig",
    "MomentRow",
    "MomentReport",
    "run_spatial_sweep",
    "run_keepprob_sweep",
    "run_inconsistency_demos",
    "unscaled_tolerance",
    "consistency_summary",
]

DEFAULT_SIDES = (2, 4, 8, 16, 32, 64, 128, 256)
DEFAULT_PROBS = (0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9)

_SCALINGS = ("with", "without", "both")
_OPERATORS = ("sap", "dropout", "ss", "zeiler")

CSV_HEADER = "operator,phase,hw,p,scaling,second_moment,stderr,n"


@dataclass
class SweepConfig:
    """Monte-Carlo sweep configuration; defaults follow the simulation protocol."""

    n_batch: int = 64
    n_channels: int = 256
    spatial_sides: tuple[int, ...] = DEFAULT_SIDES
    keep_probs: tuple[float, ...] = (0.5,)
    n_trials: int = 8
    seed: int = 0
    scaling: str = "both"
    operator: str = "sap"

    def validate(self) -> "SweepConfig":
        if self.n_batch < 1 or self.n_channels < 1:
            raise InvalidConfigError("n_batch and n_channels must be >= 1")
        if self.n_trials < 1:
            raise InvalidConfigError("n_trials must be >= 1")
        if not self.spatial_sides or any(int(s) < 1 for s in self.spatial_sides):
            raise InvalidConfigError(f"bad spatial sides {self.spatial_sides}")
        if not self.keep_probs or any(not 0.0 < float(p) <= 1.0 for p in self.keep_probs):
            raise InvalidConfigError(f"keep probs must lie in (0, 1], got {self.keep_probs}")
        if len(set(self.keep_probs)) != len(self.keep_probs):
            raise InvalidConfigError("keep probs must be distinct")
        if self.scaling not in _SCALINGS:
            raise InvalidConfigError(f"scaling must be one of {_SCALINGS}")
        if self.operator not in _OPERATORS:
            raise InvalidConfigError(f"operator must be one of {_OPERATORS}")
        if self.seed < 0:
            raise InvalidConfigError("seed must be non-negative")
        return self


@dataclass(frozen=True)
class MomentRow:
    operator: str
    phase: str
    hw: int
    p: float
    scaling: str  # 'on' / 'off' for train rows, '-' for test rows
    second_moment: float
    stderr: float
    n: int

    def to_csv(self) -> str:
        return (
            f"{self.operator},{self.phase},{self.hw},{self.p!r},{self.scaling},"
            f"{self.second_moment!r},{self.stderr!r},{self.n}"
        )


@dataclass
class MomentReport:
    rows: list[MomentRow] = field(default_factory=list)

    def to_csv_text(self) -> str:
        return "\n".join([CSV_HEADER] + [r.to_csv() for r in self.rows]) + "\n"

    def write_csv(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(self.to_csv_text())

    @classmethod
    def from_csv_text(cls, text: str) -> "MomentReport":
        lines = [ln for ln in text.strip().splitlines() if ln]
        if lines[0] != CSV_HEADER:
            raise InvalidConfigError(f"unexpected CSV header {lines[0]!r}")
        rows = []
        for ln in lines[1:]:
            op, phase, hw, p, scaling, sm, se, n = ln.split(",")
            rows.append(
                MomentRow(op, phase, int(hw), float(p), scaling, float(sm), float(se), int(n))
            )
        return cls(rows)

    @classmethod
    def read_csv(cls, path) -> "MomentReport":
        with open(path) as fh:
            return cls.from_csv_text(fh.read())

    def get(self, operator: str, phase: str, hw: int, p: float, scaling: str) -> MomentRow:
        hits = [
            r
            for r in self.rows
            if r.operator == operator
            and r.phase == phase
            and r.hw == hw
            and r.p == p
            and r.scaling == scaling
        ]
        if len(hits) != 1:
            raise KeyError(
                f"expected exactly one row for ({operator}, {phase}, {hw}, {p}, {scaling}), "
                f"found {len(hits)}"
            )
        return hits[0]


def _mean_and_stderr(values: list[float]) -> tuple[float, float]:
    arr = np.asarray(values)
    m = float(arr.mean())
    if arr.size < 2:
        return m, 0.0
    return m, float(arr.std(ddof=1) / math.sqrt(arr.size))


# ---------------------------------------------------------------------------
# SAP sweeps
# ---------------------------------------------------------------------------


def _sap_trial(cfg: SweepConfig, side: int, size_index: int, trial: int):
    """One trial: fresh input per sample, test moment plus per-p train moments.

    Returns (test_acc, [train_acc per p]) where each acc is a sum of squared
    pooled outputs over n_batch * n_channels values.  Samples stream through
    one reused buffer so large sides never allocate per sample.
    """
    stream = RngStream(cfg.seed).substream(size_index).substream(trial)
    n_probs = len(cfg.keep_probs)
    acc_test = 0.0
    acc_train = [0.0] * n_probs
    n_vals = cfg.n_channels * side * side
    buf = np.empty(n_vals)
    x = buf.reshape(1, cfg.n_channels, side, side)
    for i in range(cfg.n_batch):
        sample_stream = stream.substream(i)
        sample_normals(n_vals, sample_stream.substream(0), out=buf)
        test_out, _ = sap_forward(x, None, 1.0, Phase.TEST)
        acc_test += float(np.sum(test_out * test_out))
        for j, p in enumerate(cfg.keep_probs):
            train_out, _ = sap_forward(
                x, None, float(p), Phase.TRAIN, sample_stream.substream(1 + j)
            )
            acc_train[j] += float(np.sum(train_out * train_out))
    return acc_test, acc_train


def _run_trials(fn, args_list, jobs: int):
    if jobs <= 1:
        return [fn(*a) for a in args_list]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, *zip(*args_list)))


def _sweep(cfg: SweepConfig, jobs: int) -> MomentReport:
    cfg.validate()
    report = MomentReport()
    n_outputs = cfg.n_batch * cfg.n_channels
    n_total = cfg.n_trials * n_outputs
    for size_index, side in enumerate(cfg.spatial_sides):
        side = int(side)
        hw = side * side
        args = [(cfg, side, size_index, t) for t in range(cfg.n_trials)]
        results = _run_trials(_sap_trial, args, jobs)
        test_sms = [acc_test / n_outputs for acc_test, _ in results]
        test_mean, test_se = _mean_and_stderr(test_sms)
        for j, p in enumerate(cfg.keep_probs):
            report.rows.append(
                MomentRow("sap", "test", hw, float(p), "-", test_mean, test_se, n_total)
            )
            train_sms = [acc_train[j] / n_outputs for _, acc_train in results]
            tr_mean, tr_se = _mean_and_stderr(train_sms)
            if cfg.scaling in ("with", "both"):
                report.rows.append(
                    MomentRow("sap", "train", hw, float(p), "on", tr_mean, tr_se, n_total)
                )
            if cfg.scaling in ("without", "both"):
                # the unscaled pipeline output is the scaled one / sqrt(p)
                report.rows.append(
                    MomentRow(
                        "sap", "train", hw, float(p), "off",
                        tr_mean / float(p), tr_se / float(p), n_total,
                    )
                )
    return report


def run_spatial_sweep(cfg: SweepConfig, jobs: int = 1) -> MomentReport:
    """Second moments of test/train SAP across spatial sizes (global pooling)."""
    return _sweep(cfg, jobs)


def run_keepprob_sweep(cfg: SweepConfig, jobs: int = 1) -> MomentReport:
    """Second moments of test/train SAP across keep probabilities at one size."""
    cfg.validate()
    if len(cfg.spatial_sides) != 1:
        raise InvalidConfigError("keep-prob sweep runs at exactly one spatial size")
    return _sweep(cfg, jobs)


# ---------------------------------------------------------------------------
# Inconsistency demos: dropout, stochastic subsampling, probability-map pooling
# ---------------------------------------------------------------------------

_DROPOUT_SHAPE = (16, 64, 32, 32)  # 2^20 elements
_SS_SHAPE = (4, 4, 256, 256)  # per-sample spatial length 65536
_ZEILER_SHAPE = (16, 64, 32, 32)
_ZEILER_POOL = 4


def _dropout_trial(cfg: SweepConfig, p: float, trial: int):
    stream = RngStream(cfg.seed).substream(1000).substream(trial)
    x = sample_gaussian(_DROPOUT_SHAPE, stream.substream(0))
    train = dropout(x, p, Phase.TRAIN, stream.substream(1))
    return second_moment(train), second_moment(x)


def _ss_trial(cfg: SweepConfig, p: float, trial: int):
    stream = RngStream(cfg.seed).substream(2000).substream(trial)
    x = sample_gaussian(_SS_SHAPE, stream.substream(0))
    train = stochastic_subsample(x, p, Phase.TRAIN, stream.substream(1))
    return second_moment(train), second_moment(x)


def _zeiler_trial(cfg: SweepConfig, trial: int):
    stream = RngStream(cfg.seed).substream(3000).substream(trial)
    x = stream.substream(0).generator().random(_ZEILER_SHAPE)
    train = zeiler_stochastic_pool(x, _ZEILER_POOL, Phase.TRAIN, stream.substream(1))
    test = zeiler_stochastic_pool(x, _ZEILER_POOL, Phase.TEST)
    return second_moment(train), second_moment(test)


def run_inconsistency_demos(cfg: SweepConfig, jobs: int = 1) -> MomentReport:
    """Train/test second moments for dropout, subsampling, and probability-map pooling.

    Dropout inflates the train-phase second moment by 1/p; stochastic
    subsampling preserves it (control rows); probability-map pooling is
    inconsistent between phases.  Ratios are left to the consumer.
    """
    cfg.validate()
    report = MomentReport()

    def add(op, hw, p, trials):
        train_vals = [t for t, _ in trials]
        test_vals = [t for _, t in trials]
        n = cfg.n_trials
        tr_m, tr_se = _mean_and_stderr(train_vals)
        te_m, te_se = _mean_and_stderr(test_vals)
        report.rows.append(MomentRow(op, "train", hw, p, "-", tr_m, tr_se, n))
        report.rows.append(MomentRow(op, "test", hw, p, "-", te_m, te_se, n))

    hw_drop = _DROPOUT_SHAPE[2] * _DROPOUT_SHAPE[3]
    for p in (0.5, 0.8):
        trials = _run_trials(
            _dropout_trial, [(cfg, p, t) for t in range(cfg.n_trials)], jobs
        )
        add("dropout", hw_drop, p, trials)

    trials = _run_trials(_ss_trial, [(cfg, 0.5, t) for t in range(cfg.n_trials)], jobs)
    add("ss", _SS_SHAPE[2] * _SS_SHAPE[3], 0.5, trials)

    trials = _run_trials(_zeiler_trial, [(cfg, t) for t in range(cfg.n_trials)], jobs)
    add("zeiler", _ZEILER_SHAPE[2] * _ZEILER_SHAPE[3], 0.0, trials)
    return report


# ---------------------------------------------------------------------------
# Consistency summary
# ---------------------------------------------------------------------------


def unscaled_tolerance(p: float) -> float:
    """Relative tolerance on the unscaled train/test ratio vs its 1/p law."""
    return 0.15 if p < 0.3 else 0.10


def consistency_summary(
    report: MomentReport,
    tol_scaled: float = 0.05,
    tol_gap_law: float = 0.05,
    tol_unscaled: float | None = None,
) -> tuple[bool, list[str]]:
    """Check sweep rows against the scaling and pooling-decay laws.

    Scaled train/test ratios must sit within `tol_scaled` of 1, unscaled
    ratios within a p-dependent tolerance of 1/p, and the test-phase (global
    pooling) second moment times HW within `tol_gap_law` of 1.

    Returns (all_ok, human-readable lines).
    """
    lines: list[str] = []
    ok = True
    cells = sorted({(r.hw, r.p) for r in report.rows if r.operator == "sap"})
    for hw, p in cells:
        try:
            test = report.get("sap", "test", hw, p, "-")
        except KeyError:
            continue
        law = test.second_moment * hw
        good = abs(law - 1.0) <= tol_gap_law
        ok &= good
        lines.append(
            f"hw={hw} p={p}: test moment * hw = {law:.4f} "
            f"(tol {tol_gap_law:.0%}) {'PASS' if good else 'FAIL'}"
        )
        for scaling, target, tol in (
            ("on", 1.0, tol_scaled),
            ("off", 1.0 / p, tol_unscaled if tol_unscaled is not None else unscaled_tolerance(p)),
        ):
            try:
                train = report.get("sap", "train", hw, p, scaling)
            except KeyError:
                continue
            ratio = train.second_moment / test.second_moment
            good = abs(ratio / target - 1.0) <= tol
            ok &= good
            lines.append(
                f"hw={hw} p={p}: train/test ratio ({scaling}-scaling) = {ratio:.4f} "
                f"target {target:.4f} (tol {tol:.0%}) {'PASS' if good else 'FAIL'}"
            )
    return ok, lines
