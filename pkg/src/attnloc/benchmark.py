"""Closed-loop benchmark on synthetic worlds: map a drive, then localize a second pass."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from attnloc.evaluation import ErrorRecord, MetricsSummary, decompose_error, summarize
from attnloc.geometry import PoseSE2Offset, apply_offset, offset_between
from attnloc.mapdb import MapDatabase
from attnloc.matching import Marginalization
from attnloc.pipeline import (
    FrameInput,
    LocalizationResult,
    LocalizerConfig,
    MappingFrame,
    generate_map_with_policy,
    localize_frame,
    run_sequence,
)
from attnloc.selection import SelectionConfig
from attnloc.synth import RenderParams, SyntheticWorld, WorldSpec, generate_world, perturb_offset, render_view


@dataclass(frozen=True)
class BenchmarkConfig:
    world: WorldSpec = field(default_factory=WorldSpec)
    noise: float = 0.0
    drop_rate: float = 0.0
    max_dx: float = 1.0
    max_dy: float = 1.0
    max_dpsi_deg: float = 2.0
    online_shift: float = 0.0  # meters along the heading between mapping and online poses
    sequential: bool = False  # dead-reckon priors through run_sequence instead of per-frame perturbation
    seed: int = 0

    @property
    def render(self) -> RenderParams:
        return RenderParams(noise=self.noise, drop_rate=self.drop_rate)

    def seeds(self) -> np.random.SeedSequence:
        return np.random.SeedSequence([self.seed & 0xFFFFFFFFFFFFFFFF, 0xA1])


@dataclass(frozen=True, eq=False)
class BenchmarkRun:
    records: list[ErrorRecord]
    results: list[LocalizationResult]
    summary: MetricsSummary

    @property
    def mean_ms(self) -> float:
        return float(np.mean([r.timing["total_ms"] for r in self.results]))


@dataclass(frozen=True, eq=False)
class Scenario:
    """A world, the rendered mapping drive and online views, and their priors."""

    world: SyntheticWorld
    cfg: BenchmarkConfig
    mapping: list[MappingFrame]
    online: list[FrameInput]
    ground_truth: list
    priors: list

    def build_map(self, selection: SelectionConfig = SelectionConfig()) -> MapDatabase:
        return generate_map_with_policy(self.mapping, selection)


def make_scenario(cfg: BenchmarkConfig) -> Scenario:
    ss = cfg.seeds()
    s_world, s_map, s_online, s_prior = (int(x) for x in ss.generate_state(4, np.uint64))
    world = generate_world(replace(cfg.world, seed=s_world & 0x7FFFFFFF))
    cam = world.cameras[0]
    base = cfg.render
    mapping = []
    for i, pose in enumerate(world.trajectory):
        pyr, depth = render_view(world, pose, cam, replace(base, seed=(s_map + i) % 2**63))
        mapping.append(MappingFrame(FrameInput(float(i), (pyr,)), pose, (depth,)))

    shift = PoseSE2Offset(cfg.online_shift, 0.0, 0.0)
    gts = [apply_offset(p, shift) for p in world.trajectory]
    online = []
    for i, gt in enumerate(gts):
        pyr, _ = render_view(world, gt, cam, replace(base, seed=(s_online + i) % 2**63))
        motion = offset_between(gts[i - 1], gt) if i else PoseSE2Offset()
        online.append(FrameInput(float(i), (pyr,), motion))

    bounds = (cfg.max_dx, cfg.max_dy, math.radians(cfg.max_dpsi_deg))
    priors = [apply_offset(gt, perturb_offset(*bounds, seed=(s_prior + i) % 2**63)) for i, gt in enumerate(gts)]
    return Scenario(world, cfg, mapping, online, gts, priors)


def evaluate(scenario: Scenario, db: MapDatabase, localizer: LocalizerConfig = LocalizerConfig()) -> BenchmarkRun:
    cams = scenario.world.cameras[:1]
    if scenario.cfg.sequential:
        results = run_sequence(scenario.online, scenario.priors[0], db, cams, localizer)
    else:
        results = [localize_frame(f, p, db, cams, localizer) for f, p in zip(scenario.online, scenario.priors)]
    records = [
        decompose_error(r.estimated_pose, gt, r.available, r.timestamp) for r, gt in zip(results, scenario.ground_truth)
    ]
    return BenchmarkRun(records, results, summarize(records))


def run_benchmark(
    cfg: BenchmarkConfig,
    selection: SelectionConfig = SelectionConfig(),
    localizer: LocalizerConfig = LocalizerConfig(),
) -> BenchmarkRun:
    scenario = make_scenario(cfg)
    return evaluate(scenario, scenario.build_map(selection), localizer)


ABLATION_GRID = (
    ("FPS", False, Marginalization.REDUCE_AVERAGE),
    ("FPS", False, Marginalization.WEIGHTED_AVERAGE),
    ("WFPS", True, Marginalization.REDUCE_AVERAGE),
    ("WFPS", True, Marginalization.WEIGHTED_AVERAGE),
)


@dataclass(frozen=True)
class AblationRow:
    selection: str
    marginalization: str
    summary: MetricsSummary


def run_ablation(
    cfg: BenchmarkConfig,
    selection: SelectionConfig = SelectionConfig(),
    localizer: LocalizerConfig = LocalizerConfig(),
) -> list[AblationRow]:
    """Every selection x marginalization pairing on one shared scenario."""
    scenario = make_scenario(cfg)
    maps = {}
    rows = []
    for name, weighted, marg in ABLATION_GRID:
        if weighted not in maps:
            maps[weighted] = scenario.build_map(replace(selection, weighted=weighted))
        run = evaluate(scenario, maps[weighted], replace(localizer, marginalization=marg))
        rows.append(AblationRow(name, marg.value, run.summary))
    return rows
