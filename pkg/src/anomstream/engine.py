"""Online learning state machine around the scorer, thresholds and forest.

Each incoming record extends a sliding window, gets a scalar loss from the
scorer, and is routed by the current thresholds into high-confidence
normal, high-confidence abnormal, or the uncertain band decided by the
forest. High-confidence losses feed bounded FIFO buffers from which the
thresholds are re-fitted, and both models retrain from pseudo-labeled
accumulators every ``update_interval`` samples.

The engine is a single-writer state machine: ``process`` and
``maybe_retrain`` must be called sequentially from one thread.
"""

from __future__ import annotations

import logging
from collections import deque
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Sequence

import numpy as np

from .errors import (
    DegenerateSampleError,
    DegenerateTrainingSetError,
    EmptyBufferError,
    InsufficientDataError,
    NotBootstrappedError,
)
from .forest import ForestConfig, RandomForest, fit_forest, predict
from .ingest import StreamRecord, windows as make_windows
from .labels import Label
from .scorer import LstmVaeScorer, ScorerConfig, SequenceWindow
from .thresholds import ThresholdPair, adaptive_threshold

logger = logging.getLogger(__name__)


class Phase(Enum):
    INITIAL = "initial"
    STEADY = "steady"


class Route(Enum):
    HIGH_CONF_NORMAL = "high_conf_normal"
    HIGH_CONF_ABNORMAL = "high_conf_abnormal"
    CLASSIFIER = "classifier"


@dataclass(frozen=True)
class Verdict:
    label: Label
    route: Route
    loss: float
    votes: tuple[int, int] | None = None


class LossBuffer:
    """Bounded FIFO queue of scalar losses; eviction is strictly oldest-first."""

    def __init__(self, capacity: int):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self._values: deque[float] = deque(maxlen=capacity)

    def append(self, value: float) -> None:
        self._values.append(float(value))

    def extend(self, values) -> None:
        for v in values:
            self.append(v)

    def values(self) -> np.ndarray:
        return np.fromiter(self._values, dtype=float, count=len(self._values))

    def __len__(self) -> int:
        return len(self._values)


@dataclass
class EngineConfig:
    """Knobs of the online loop; scorer/forest geometry ride along."""

    scorer: ScorerConfig
    forest: ForestConfig = field(default_factory=ForestConfig)
    p1: float = 0.98
    p2: float = 0.10
    abnormal_warmup: int = 500   # abnormal losses collected before dual thresholds
    update_interval: int = 6400  # samples between threshold/model updates
    buffer_capacity: int = 5000
    seed: int = 0

    def __post_init__(self) -> None:
        for name, p in (("p1", self.p1), ("p2", self.p2)):
            if not 0.0 < p < 1.0:
                raise ValueError(f"{name} must lie in (0, 1)")
        if self.abnormal_warmup < 1 or self.update_interval < 1:
            raise ValueError("abnormal_warmup and update_interval must be >= 1")
        if self.abnormal_warmup > self.buffer_capacity:
            raise ValueError("abnormal_warmup cannot exceed buffer_capacity")


@dataclass(frozen=True)
class RetrainReport:
    index: int
    samples_seen: int
    old_t1: float
    new_t1: float
    old_t2: float | None
    new_t2: float | None
    scorer_windows: int
    forest_samples: int
    forest_trained: bool
    notes: tuple[str, ...] = ()


@dataclass(frozen=True)
class VerdictEvent:
    index: int
    verdict: Verdict
    t1: float
    t2: float | None


@dataclass(frozen=True)
class RetrainEvent:
    report: RetrainReport


@dataclass(frozen=True)
class PhaseTransitionEvent:
    samples_seen: int
    t2: float


EngineEvent = VerdictEvent | RetrainEvent | PhaseTransitionEvent


class OnlineAnomalyDetector:
    """Two-layer online detector with self-adapting thresholds.

    ``scorer`` may be any object with the LstmVaeScorer scoring/training
    surface (used by tests to fuzz the state machine with a cheap stub).
    The adapt_* switches implement the ablation modes: frozen thresholds,
    frozen scorer, or single-threshold operation without the classifier.
    """

    def __init__(
        self,
        config: EngineConfig,
        scorer=None,
        *,
        pretrained: bool = False,
        adapt_thresholds: bool = True,
        adapt_scorer: bool = True,
        two_layer: bool = True,
        sink: Callable[[EngineEvent], None] | None = None,
    ):
        self.config = config
        self.scorer = scorer if scorer is not None else LstmVaeScorer(config.scorer)
        self._pretrained = pretrained
        self.adapt_thresholds = adapt_thresholds
        self.adapt_scorer = adapt_scorer
        self.two_layer = two_layer
        self._sink = sink

        self.phase = Phase.INITIAL
        self.normal_losses = LossBuffer(config.buffer_capacity)
        self.abnormal_losses = LossBuffer(config.buffer_capacity)
        self.thresholds: ThresholdPair | None = None
        self.forest: RandomForest | None = None
        self.samples_seen = 0
        self.retrains_done = 0

        self._window_tail: deque[np.ndarray] = deque(maxlen=config.scorer.timestep)
        self._batch: list[tuple[StreamRecord, float]] = []
        self._pending_normal_windows: list[np.ndarray] = []
        self._pending_features: list[np.ndarray] = []
        self._pending_labels: list[Label] = []
        self._forest_seeds = np.random.SeedSequence(config.seed)

    # ------------------------------------------------------------- lifecycle

    @property
    def bootstrapped(self) -> bool:
        return self.thresholds is not None

    def _emit(self, event: EngineEvent) -> None:
        if self._sink is not None:
            self._sink(event)

    def bootstrap(self, first_round: Sequence[StreamRecord]) -> None:
        """Train the scorer on the first-round slice and fit the initial T1.

        The slice is treated entirely as pseudo-normal; its window losses
        seed the normal buffer.
        """
        t = self.config.scorer.timestep
        first_windows = list(make_windows(first_round, t))
        if len(first_windows) < 2:
            raise InsufficientDataError(
                f"first round yields {len(first_windows)} windows, need at least 2"
            )
        if not self._pretrained:
            self.scorer.train(first_windows, self.config.scorer.epochs_initial)
        losses = self.scorer.score_many(first_windows)
        self.normal_losses.extend(losses)
        try:
            t1, fit = adaptive_threshold(self.normal_losses.values(), self.config.p1)
        except DegenerateSampleError as exc:
            raise InsufficientDataError(
                f"first-round losses are degenerate: {exc}"
            ) from exc
        self.thresholds = ThresholdPair(
            t1=t1, t2=None, p1=self.config.p1, p2=self.config.p2, fit_normal=fit
        )
        for record in first_round[-t:]:
            self._window_tail.append(np.asarray(record.features, dtype=float))

    # -------------------------------------------------------------- routing

    def _current_window(self, record: StreamRecord) -> np.ndarray:
        self._window_tail.append(np.asarray(record.features, dtype=float))
        return np.stack(self._window_tail)

    def process(self, record: StreamRecord) -> Verdict:
        """Score, route and pseudo-label one record."""
        if not self.bootstrapped:
            raise NotBootstrappedError("call bootstrap() before process()")
        rows = self._current_window(record)
        loss = self.scorer.score(SequenceWindow(rows=rows, end_index=record.index))
        self._batch.append((record, loss))
        t = self.thresholds

        if self.phase is Phase.INITIAL:
            if loss < t.t1:
                verdict = Verdict(Label.NORMAL, Route.HIGH_CONF_NORMAL, loss)
                self.normal_losses.append(loss)
                self._pending_normal_windows.append(rows)
            else:
                verdict = Verdict(Label.ABNORMAL, Route.HIGH_CONF_ABNORMAL, loss)
                self.abnormal_losses.append(loss)
            self._pending_features.append(record.features)
            self._pending_labels.append(verdict.label)
        else:
            if loss < t.t1:
                verdict = Verdict(Label.NORMAL, Route.HIGH_CONF_NORMAL, loss)
                self.normal_losses.append(loss)
                self._pending_normal_windows.append(rows)
                self._pending_features.append(record.features)
                self._pending_labels.append(Label.NORMAL)
            elif loss > t.t2:
                verdict = Verdict(Label.ABNORMAL, Route.HIGH_CONF_ABNORMAL, loss)
                self.abnormal_losses.append(loss)
                self._pending_features.append(record.features)
                self._pending_labels.append(Label.ABNORMAL)
            else:
                if self.forest is not None:
                    label, votes = predict(self.forest, record.features)
                else:
                    # cold start before the first steady retrain: midpoint rule
                    midpoint = 0.5 * (t.t1 + t.t2)
                    label = Label.NORMAL if loss <= midpoint else Label.ABNORMAL
                    votes = None
                verdict = Verdict(label, Route.CLASSIFIER, loss, votes)
                if label is Label.NORMAL:
                    self._pending_normal_windows.append(rows)

        self.samples_seen += 1
        self._emit(VerdictEvent(record.index, verdict, t.t1, t.t2))
        self.phase_transition()
        return verdict

    def phase_transition(self) -> bool:
        """Switch to dual-threshold operation once abnormal losses suffice.

        Flips at most once, computing the initial T2 at that moment. With
        ``two_layer`` disabled the engine stays single-threshold forever.
        """
        if not self.two_layer or self.phase is not Phase.INITIAL:
            return False
        if len(self.abnormal_losses) < self.config.abnormal_warmup:
            return False
        self.phase = Phase.STEADY
        t = self.thresholds
        try:
            t2, fit_abn = adaptive_threshold(self.abnormal_losses.values(), self.config.p2)
        except DegenerateSampleError:
            logger.warning("abnormal losses degenerate at phase transition; T2 <- T1")
            t2, fit_abn = t.t1, None
        if t2 <= t.t1:
            logger.warning("T2 (%.6g) <= T1 (%.6g): uncertain band is empty", t2, t.t1)
        self.thresholds = ThresholdPair(
            t1=t.t1, t2=t2, p1=t.p1, p2=t.p2, fit_normal=t.fit_normal, fit_abnormal=fit_abn
        )
        self._emit(PhaseTransitionEvent(self.samples_seen, t2))
        return True

    # ------------------------------------------------------------ retraining

    def _refit_threshold(self, buffer: LossBuffer, p: float, label: str):
        try:
            return adaptive_threshold(buffer.values(), p)
        except (EmptyBufferError, DegenerateSampleError) as exc:
            logger.warning("keeping previous %s threshold: %s", label, exc)
            return None

    def maybe_retrain(self) -> RetrainReport | None:
        """Recompute thresholds and retrain both models every full batch."""
        if len(self._batch) < self.config.update_interval:
            return None
        t = self.thresholds
        notes: list[str] = []
        new_t1, new_t2 = t.t1, t.t2
        fit_n, fit_a = t.fit_normal, t.fit_abnormal

        if self.adapt_thresholds:
            refit = self._refit_threshold(self.normal_losses, self.config.p1, "T1")
            if refit is not None:
                new_t1, fit_n = refit
            else:
                notes.append("t1_kept")
            if self.phase is Phase.STEADY:
                refit = self._refit_threshold(self.abnormal_losses, self.config.p2, "T2")
                if refit is not None:
                    new_t2, fit_a = refit
                else:
                    notes.append("t2_kept")
            if new_t2 is not None and new_t2 <= new_t1:
                logger.warning(
                    "T2 (%.6g) <= T1 (%.6g): uncertain band is empty", new_t2, new_t1
                )
                notes.append("empty_uncertain_band")
            self.thresholds = ThresholdPair(
                t1=new_t1, t2=new_t2, p1=t.p1, p2=t.p2,
                fit_normal=fit_n, fit_abnormal=fit_a,
            )

        scorer_windows = len(self._pending_normal_windows)
        if self.adapt_scorer:
            if scorer_windows:
                wins = [
                    SequenceWindow(rows=r, end_index=-1)
                    for r in self._pending_normal_windows
                ]
                self.scorer.train(wins, self.config.scorer.epochs_update)
            else:
                logger.warning("no pseudo-normal windows this batch; scorer not updated")
                notes.append("scorer_skipped")

        forest_samples = len(self._pending_features)
        forest_trained = False
        if self.two_layer and self.phase is Phase.STEADY:
            try:
                self.forest = fit_forest(
                    np.asarray(self._pending_features, dtype=float),
                    np.asarray([int(l) for l in self._pending_labels], dtype=np.int64),
                    self.config.forest,
                    seed=self._forest_seeds.spawn(1)[0],
                )
                forest_trained = True
            except DegenerateTrainingSetError as exc:
                logger.warning("keeping previous forest: %s", exc)
                notes.append("forest_skipped")

        self._pending_normal_windows.clear()
        self._pending_features.clear()
        self._pending_labels.clear()
        self._batch.clear()
        self.retrains_done += 1
        report = RetrainReport(
            index=self.retrains_done,
            samples_seen=self.samples_seen,
            old_t1=t.t1,
            new_t1=self.thresholds.t1,
            old_t2=t.t2,
            new_t2=self.thresholds.t2,
            scorer_windows=scorer_windows,
            forest_samples=forest_samples,
            forest_trained=forest_trained,
            notes=tuple(notes),
        )
        self._emit(RetrainEvent(report))
        return report
