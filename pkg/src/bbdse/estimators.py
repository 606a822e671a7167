"""scikit-learn style wrappers around the detectors.

The estimators are fitted on a list of traces (``X``) and then predict a
label for each address they are asked about.  Nothing is learnt in the
statistical sense: ``fit`` runs the analyses and caches the reports.
"""

from __future__ import annotations

from sklearn.base import BaseEstimator, ClassifierMixin

from .detect import Opacity, _aggregate, classify_rets, detect_all_opaque
from .disasm import perfect_set, score, sparse
from .solver import DEFAULT_TIMEOUT, Solver
from .tracer import Trace


def _as_traces(X) -> list:
    traces = [X] if isinstance(X, Trace) else list(X)
    if not traces or not all(isinstance(t, Trace) for t in traces):
        raise ValueError("X must be a non-empty list of traces")
    return traces


def _merge_opacity(per_trace: list, traces=()) -> dict:
    """One status per address across traces: an observation in any trace
    wins, otherwise opacity must hold in every trace that ran the site."""
    seen: dict = {}
    for t in traces:
        for st in t.steps:
            if st.branch_taken is not None:
                seen.setdefault(st.addr, set()).add(st.branch_taken)
    out = {}
    sites = {a for res in per_trace for a in res}
    for a in sites:
        sts = [res[a] for res in per_trace if a in res]
        labels = {s.status for s in sts}
        if len(seen.get(a, ())) == 2 and Opacity.COVERED not in labels:
            pick = type(sts[0])(a, Opacity.COVERED, k=sts[0].k)
        elif Opacity.COVERED in labels:
            pick = next(s for s in sts if s.status is Opacity.COVERED)
        elif Opacity.GENUINE in labels:
            pick = next(s for s in sts if s.status is Opacity.GENUINE)
        elif labels == {Opacity.OPAQUE} and len({s.branch for s in sts}) == 1:
            pick = sts[0]
        elif labels <= {Opacity.OPAQUE, Opacity.LIKELY_DEAD}:
            pick = next(s for s in sts if s.status is Opacity.LIKELY_DEAD) \
                if Opacity.LIKELY_DEAD in labels else sts[0]
            if len({s.branch for s in sts}) > 1:
                # opposite directions refused in different runs: both were seen
                pick = type(sts[0])(a, Opacity.COVERED, k=sts[0].k)
        else:
            pick = next(s for s in sts if s.status is Opacity.UNKNOWN)
        out[a] = pick
    return out


class OpacityDetector(ClassifierMixin, BaseEstimator):
    """Labels conditional jumps COVERED, GENUINE, OPAQUE, LIKELY_DEAD or UNKNOWN."""

    def __init__(self, k: int = 16, timeout: float = DEFAULT_TIMEOUT, solver_path=None,
                 bound_metric: str = "steps"):
        self.k = k
        self.timeout = timeout
        self.solver_path = solver_path
        self.bound_metric = bound_metric

    def fit(self, X, y=None):
        traces = _as_traces(X)
        with Solver(self.solver_path, self.timeout) as s:
            per = [detect_all_opaque(t, self.k, s, self.timeout, self.bound_metric)
                   for t in traces]
        self.reports_ = _merge_opacity(per, traces)
        self.classes_ = [str(o) for o in Opacity]
        return self

    def predict(self, addrs) -> list:
        """Label per address; addresses never executed are UNKNOWN."""
        self._check_fitted()
        return [str(self.reports_[a].status) if a in self.reports_ else str(Opacity.UNKNOWN)
                for a in addrs]

    def opaque_sites(self) -> list:
        self._check_fitted()
        return sorted(a for a, s in self.reports_.items() if s.status is Opacity.OPAQUE)

    def _check_fitted(self):
        if not hasattr(self, "reports_"):
            raise RuntimeError("call fit() first")


class StackTamperingDetector(ClassifierMixin, BaseEstimator):
    """Labels ret instructions with integrity+alignment+multiplicity strings."""

    def __init__(self, k_max: int = 10_000, timeout: float = DEFAULT_TIMEOUT, solver_path=None):
        self.k_max = k_max
        self.timeout = timeout
        self.solver_path = solver_path

    def fit(self, X, y=None):
        traces = _as_traces(X)
        reports: dict = {}
        with Solver(self.solver_path, self.timeout) as s:
            for t in traces:
                for a, rep in classify_rets(t, self.k_max, s, self.timeout).items():
                    if a in reports:
                        reports[a].occurrences += rep.occurrences
                        reports[a].targets |= rep.targets
                    else:
                        reports[a] = rep
        for rep in reports.values():
            rep.label = _aggregate(rep)
        self.reports_ = reports
        return self

    def predict(self, addrs) -> list:
        if not hasattr(self, "reports_"):
            raise RuntimeError("call fit() first")
        return [str(self.reports_[a].label) if a in self.reports_ else "UNKNOWN" for a in addrs]


class SparseDisassembler(BaseEstimator):
    """Sparse disassembly of one program image from its traces.

    ``fit(traces, image=...)`` runs both detectors and the steered traversal;
    ``predict(addrs)`` tells whether each address starts a recovered
    instruction.
    """

    def __init__(self, k: int = 16, k_max: int = 10_000, timeout: float = DEFAULT_TIMEOUT,
                 solver_path=None):
        self.k = k
        self.k_max = k_max
        self.timeout = timeout
        self.solver_path = solver_path

    def fit(self, X, y=None, image=None):
        traces = _as_traces(X)
        image = image if image is not None else traces[0].program
        op = OpacityDetector(self.k, self.timeout, self.solver_path).fit(traces)
        st = StackTamperingDetector(self.k_max, self.timeout, self.solver_path).fit(traces)
        self.opacity_ = op.reports_
        self.rets_ = st.reports_
        self.result_ = sparse(image, traces, self.opacity_, self.rets_)
        self.traces_ = traces
        self.image_ = image
        return self

    def predict(self, addrs) -> list:
        if not hasattr(self, "result_"):
            raise RuntimeError("call fit() first")
        have = self.result_.addrs
        return [a in have for a in addrs]

    def score(self, legit_addrs, y=None) -> float:
        """Fraction of the perfect instruction set recovered, minus extras."""
        m = score(self.result_, perfect_set(self.image_, legit_addrs, self.traces_))
        return 1.0 - (m.over + m.under) / max(m.perfect, 1)
