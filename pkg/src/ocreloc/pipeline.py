"""Per-query localization: retrieval and FM-PnP for an initial pose, then
observation-constrained refinement."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

from .errors import DescriptorError, NoHypothesisError
from .mapping import ImageRecord, LandmarkMap
from .pnp import MatchConfig, PnPConfig, PoseEstimate
from .refine import RefinerConfig, refine_iteratively
from .retrieval import GlobalIndex, RetrievalConfig, initial_pose


@dataclass
class LocalizerConfig:
    retrieval: RetrievalConfig = field(default_factory=RetrievalConfig)
    match: MatchConfig = field(default_factory=MatchConfig)
    pnp: PnPConfig = field(default_factory=PnPConfig)
    refine: RefinerConfig = field(default_factory=RefinerConfig)
    use_refinement: bool = True


@dataclass(eq=False)
class LocalizationResult:
    name: str
    estimate: Optional[PoseEstimate]
    initial: Optional[PoseEstimate] = None
    failure: Optional[str] = None

    @property
    def ok(self) -> bool:
        return self.estimate is not None

    def log_record(self) -> dict:
        rec: dict = {"name": self.name, "ok": self.ok}
        if self.failure:
            rec["failure"] = self.failure
        if self.initial is not None:
            rec["initial_inliers"] = self.initial.num_inliers
        e = self.estimate
        if e is not None:
            rec["inliers"] = e.num_inliers
            rec["rounds"] = e.rounds
            rec["flags"] = list(e.flags)
            rec["sigma_t"] = e.uncertainty[0] if e.uncertainty else None
            rec["sigma_r"] = e.uncertainty[1] if e.uncertainty else None
            rec["history"] = [r._asdict() for r in e.history]
        return rec


def check_compatible(query: ImageRecord, m: LandmarkMap) -> None:
    """Raise :class:`DescriptorError` when query descriptors don't fit the map."""
    if query.local_dim != m.local_dim:
        raise DescriptorError(f"{query.name}: local descriptor dim {query.local_dim}, map has {m.local_dim}")
    if len(query.global_descriptor) != m.global_dim:
        raise DescriptorError(
            f"{query.name}: global descriptor dim {len(query.global_descriptor)}, map has {m.global_dim}"
        )


def localize_query(
    query: ImageRecord,
    m: LandmarkMap,
    cfg: Optional[LocalizerConfig] = None,
    index: Optional[GlobalIndex] = None,
) -> LocalizationResult:
    """Localize one query; failures come back as a result with a reason.

    Descriptor dimension mismatches are configuration problems and raise.
    """
    cfg = cfg or LocalizerConfig()
    check_compatible(query, m)
    try:
        init, _ = initial_pose(query, m, cfg.retrieval, cfg.match, cfg.pnp, index)
    except NoHypothesisError:
        return LocalizationResult(query.name, None, None, "no_hypothesis")
    if not cfg.use_refinement:
        return LocalizationResult(query.name, init, init)
    return LocalizationResult(query.name, refine_iteratively(init, query, m, cfg.refine, cfg.pnp), init)
