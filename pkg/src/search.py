"""
Time-bound k/c grid search.

The main loop doubles the first-layer filter count k while accuracy keeps
improving. When it stops improving, every depth c of the current k is tried;
if some depth beats the last accuracy the search doubles k again from that
depth, otherwise it falls back to the intermediate k values queued between
the last successful k and its double.
"""
import time
import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Dict, List, Optional, Tuple, Any, Protocol

from architecture import ArchSpec, InputShape, ShapeInfeasibleError, build_arch_spec, compute_c_max
from profiler import ProfilerConfig, ResourceEstimate, ResourceLimits, check_feasibility, profile
from training import TrainConfig, TrainingError, train_candidate

# Set up logging
log = logging.getLogger(__name__)

MULTIPLIER = 2
DIVIDER = 4


class Phase(Enum):
    """Which part of the search requested an evaluation"""
    MAIN = "main"
    DEPTH = "depth"
    PENDING = "pending"


@dataclass(frozen=True)
class SearchConfig:
    limits: ResourceLimits
    search_time: float  # seconds of wall clock
    candidate_epochs: int = 4
    seed: int = 0
    profiler_cfg: ProfilerConfig = field(default_factory=ProfilerConfig)
    initial_k: int = 4
    initial_c: int = 3
    batch_size: int = 64
    learning_rate: float = 1e-3

    def __post_init__(self):
        if self.search_time < 0:
            raise ValueError(f"search_time must be >= 0, got {self.search_time}")
        if self.candidate_epochs < 1:
            raise ValueError(f"candidate_epochs must be >= 1, got {self.candidate_epochs}")
        if self.initial_k < 1 or self.initial_c < 0:
            raise ValueError(f"Invalid initial pair k={self.initial_k}, c={self.initial_c}")

    def train_config(self) -> TrainConfig:
        return TrainConfig(epochs=self.candidate_epochs, learning_rate=self.learning_rate,
                           batch_size=self.batch_size, seed=self.seed)

    def to_dict(self) -> Dict[str, Any]:
        return {
            'limits': self.limits.to_dict(),
            'search_time_s': self.search_time,
            'candidate_epochs': self.candidate_epochs,
            'seed': self.seed,
            'profiler': self.profiler_cfg.to_dict(),
            'initial_k': self.initial_k,
            'initial_c': self.initial_c,
            'batch_size': self.batch_size,
            'learning_rate': self.learning_rate,
        }


@dataclass
class SearchState:
    """Live variables of the main loop"""
    k: int
    c: int
    K: int
    C: int
    max_acc_found: float = 0.0
    pendings: List[Tuple[int, int]] = field(default_factory=list)
    elapsed: float = 0.0
    memo: Dict[Tuple[int, int], float] = field(default_factory=dict)


@dataclass(frozen=True)
class CandidateRecord:
    """One build (and possibly training) of a (k, c) pair"""
    k: int
    c: int
    resources: ResourceEstimate
    feasible: bool
    accuracy: float
    phase: Phase
    wall_ms: int
    from_memo: bool = False

    def to_dict(self) -> Dict[str, Any]:
        return {
            'k': self.k,
            'c': self.c,
            'resources': self.resources.to_dict(),
            'feasible': self.feasible,
            'accuracy': self.accuracy,
            'phase': self.phase.value,
            'wall_ms': self.wall_ms,
            'from_memo': self.from_memo,
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "CandidateRecord":
        return cls(
            k=int(data['k']),
            c=int(data['c']),
            resources=ResourceEstimate.from_dict(data['resources']),
            feasible=bool(data['feasible']),
            accuracy=float(data['accuracy']),
            phase=Phase(data['phase']),
            wall_ms=int(data['wall_ms']),
            from_memo=bool(data.get('from_memo', False)),
        )


@dataclass
class SearchResult:
    K: int
    C: int
    records: List[CandidateRecord]
    initial_c: int
    clamped: bool
    max_acc_found: float
    wall_ms: int


class CandidateEvaluator(Protocol):
    """
    Builds and trains candidates for the search.

    build_and_profile returns (None, ResourceEstimate.unbuildable()) for pairs
    the input shape cannot host. train is only ever called for feasible pairs.
    """

    def build_and_profile(self, k: int, c: int) -> Tuple[Optional[ArchSpec], ResourceEstimate]:
        ...

    def train(self, spec: Optional[ArchSpec], k: int, c: int) -> float:
        ...


def update_status(k: int, c: int, pendings: List[Tuple[int, int]]) -> Tuple[int, int, int, List[Tuple[int, int]]]:
    """
    Accept (k, c) as the current answer and double k.

    Returns (K, k', C, pendings'). The previous pendings are discarded; the new
    ones are the `DIVIDER` evenly spaced k values between k and 2k, kept only
    when their spacing is at least one filter.
    """
    delta = k * MULTIPLIER - k
    incr = delta // DIVIDER
    pendings = []
    if incr >= 1:
        for i in range(1, DIVIDER + 1):
            pendings.append((k + i * incr, c))
    return k, k * MULTIPLIER, c, pendings


def build_and_profile(k: int, c: int, input_shape: InputShape,
                      profiler_cfg: ProfilerConfig) -> Tuple[Optional[ArchSpec], ResourceEstimate]:
    """Instantiate and profile (k, c); a shape-infeasible pair yields (None, unbuildable)"""
    try:
        spec = build_arch_spec(k, c, input_shape)
    except ShapeInfeasibleError as e:
        log.debug(f"k={k}, c={c} cannot be built: {e}")
        return None, ResourceEstimate.unbuildable()
    return spec, profile(spec, profiler_cfg)


class TrainingEvaluator:
    """Evaluates candidates by short training on a split, normalized dataset"""

    def __init__(self, dataset, profiler_cfg: ProfilerConfig, train_cfg: TrainConfig):
        self.dataset = dataset
        self.profiler_cfg = profiler_cfg
        self.train_cfg = train_cfg

    def build_and_profile(self, k: int, c: int) -> Tuple[Optional[ArchSpec], ResourceEstimate]:
        return build_and_profile(k, c, self.dataset.meta, self.profiler_cfg)

    def train(self, spec: Optional[ArchSpec], k: int, c: int) -> float:
        try:
            return train_candidate(spec, self.dataset, self.train_cfg)
        except TrainingError as e:
            log.warning(f"Candidate k={k}, c={c} failed to train, scoring it 0: {e}")
            return 0.0


class SearchEngine:
    """
    One time-bound search over (k, c).

    Args:
        input_shape: shape of the dataset windows
        cfg: limits, budget and initial pair
        evaluator: builds/profiles and trains candidates
        clock: returns seconds; time.monotonic unless a test drives it
        on_record: called with every CandidateRecord as soon as it exists
    """

    def __init__(self, input_shape: InputShape, cfg: SearchConfig, evaluator: CandidateEvaluator,
                 clock: Callable[[], float] = time.monotonic,
                 on_record: Optional[Callable[[CandidateRecord], None]] = None):
        self.input_shape = input_shape
        self.cfg = cfg
        self.evaluator = evaluator
        self.clock = clock
        self.on_record = on_record
        self.n = compute_c_max(input_shape.length)
        self.records: List[CandidateRecord] = []
        self._start = None
        self._next_phase = Phase.MAIN

        initial_c = cfg.initial_c
        self.clamped = initial_c > self.n
        if self.clamped:
            log.warning(f"Initial c={initial_c} exceeds c_max={self.n} for length {input_shape.length}, "
                        f"clamping to {self.n}")
            initial_c = self.n
        self.initial_c = initial_c
        self.state = SearchState(k=cfg.initial_k, c=initial_c, K=cfg.initial_k, C=initial_c)

    def has_search_time(self) -> bool:
        """True while the elapsed time is strictly below the budget"""
        self.state.elapsed = self.clock() - self._start
        return self.state.elapsed < self.cfg.search_time

    def evaluate(self, k: int, c: int, phase: Phase) -> Tuple[bool, float]:
        """Build, gate and (unless memoized) train one candidate; returns (feasible, accuracy)"""
        started = time.perf_counter()
        spec, resources = self.evaluator.build_and_profile(k, c)
        feasible = check_feasibility(resources, self.cfg.limits)
        accuracy = 0.0
        from_memo = False
        if feasible:
            if (k, c) in self.state.memo:
                accuracy = self.state.memo[(k, c)]
                from_memo = True
                log.debug(f"Memo hit for k={k}, c={c}: {accuracy:.4f}")
            else:
                accuracy = float(self.evaluator.train(spec, k, c))
                self.state.memo[(k, c)] = accuracy
        wall_ms = int(round((time.perf_counter() - started) * 1000))
        record = CandidateRecord(k=k, c=c, resources=resources, feasible=feasible, accuracy=accuracy,
                                 phase=phase, wall_ms=wall_ms, from_memo=from_memo)
        self.records.append(record)
        if feasible:
            log.info(f"[{phase.value}] k={k}, c={c}: {resources.describe()}, accuracy {accuracy:.4f}"
                     f"{' (memo)' if from_memo else ''}")
        else:
            log.info(f"[{phase.value}] k={k}, c={c}: infeasible")
        if self.on_record is not None:
            self.on_record(record)
        return feasible, accuracy

    def explore_depth(self, acc: float) -> Tuple[bool, int, int, int, int]:
        """
        Try every depth 0..n of the current k.

        Returns (is_continueable, k, c, K, C). The depth lists start with the
        sentinel pair (0, 0); the earliest maximum wins. A depth better than
        `acc` re-runs update_status from that depth, otherwise the newest
        pending pair is popped.
        """
        state = self.state
        accs = [0.0]
        cs = [0]
        for i in range(0, self.n + 1):
            if not self.has_search_time():
                log.debug(f"Budget exhausted at depth {i} of k={state.k}")
                break
            feasible, depth_acc = self.evaluate(state.k, i, Phase.DEPTH)
            if not feasible:
                break
            accs.append(depth_acc)
            cs.append(i)

        indx = accs.index(max(accs))
        is_continueable = False
        if accs[indx] > acc:
            state.c = cs[indx]
            state.K, state.k, state.C, state.pendings = update_status(state.k, state.c, state.pendings)
            is_continueable = True
        elif state.pendings:
            state.k, state.c = state.pendings.pop()
            self._next_phase = Phase.PENDING
            is_continueable = True
        return is_continueable, state.k, state.c, state.K, state.C

    def run(self) -> SearchResult:
        state = self.state
        self._start = self.clock()
        log.info(f"Search started: limits {self.cfg.limits.to_dict()}, budget {self.cfg.search_time:g}s, "
                 f"initial k={state.k}, c={state.c}, c_max={self.n}")

        while True:
            if not self.has_search_time():
                log.info("Search time exhausted")
                break
            phase, self._next_phase = self._next_phase, Phase.MAIN
            feasible, acc = self.evaluate(state.k, state.c, phase)
            if feasible and state.max_acc_found < acc:
                state.max_acc_found = acc
                state.K, state.k, state.C, state.pendings = update_status(state.k, state.c, state.pendings)
                continue
            is_continueable, _, _, _, _ = self.explore_depth(acc)
            if not is_continueable:
                log.info("No deeper or pending candidate left")
                break

        wall_ms = int(round((self.clock() - self._start) * 1000))
        log.info(f"Search finished: K={state.K}, C={state.C}, best accuracy {state.max_acc_found:.4f}, "
                 f"{len(self.records)} candidates")
        return SearchResult(K=state.K, C=state.C, records=list(self.records), initial_c=self.initial_c,
                            clamped=self.clamped, max_acc_found=state.max_acc_found, wall_ms=wall_ms)


def run_search(dataset, cfg: SearchConfig, evaluator: Optional[CandidateEvaluator] = None,
               clock: Callable[[], float] = time.monotonic,
               on_record: Optional[Callable[[CandidateRecord], None]] = None) -> SearchResult:
    """
    Run the search on a split, normalized dataset.

    Without an explicit evaluator candidates are trained with train_candidate
    for cfg.candidate_epochs epochs.
    """
    if evaluator is None:
        evaluator = TrainingEvaluator(dataset, cfg.profiler_cfg, cfg.train_config())
    engine = SearchEngine(dataset.meta, cfg, evaluator, clock=clock, on_record=on_record)
    return engine.run()
