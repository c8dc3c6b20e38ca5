"""The data-driven design loop: seeding, VAE crossover, overlap-constrained
mutation, high-fidelity evaluation and selection, with per-iteration
checkpoints and CSV outputs."""
from __future__ import annotations

import csv
import dataclasses
import json
import logging
import math
import shutil
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .evolution import (
    EXPLOITATION, Candidate, Population, hypervolume_2d, nondominated_mask,
    select_conventional, select_ph, write_front_csv,
)
from .fem import InfeasibleCandidate, evaluate_high_fidelity, lbracket_bc
from .grid import DensityField, lbracket_mask, write_pgm
from .lowfid import (
    LowFidConfig, SeedingParams, initial_guess, reference_density,
    seeding_grid, solve_low_fidelity, solve_mutation,
)
from .vae import SpxConfig, TrainConfig, crossover

log = logging.getLogger(__name__)

MODES = ("conventional", "ph")

# stage ids for seed splitting
_STAGE_VAE = 1
_STAGE_MUT = 2


@dataclass(frozen=True)
class RunConfig:
    n: int = 80
    cut: float = 0.6
    mode: str = "ph"
    t_max: int = 200
    n_ini: int = 100
    n_pop: int = 100
    n_vae: Optional[int] = None  # defaults to n_pop
    n_mut: int = 16
    t_mut: int = 5
    g_mut_max: float = 0.01
    p: float = 2.0
    threshold: float = 0.5
    ref_point: Optional[tuple] = None  # None: 1.1 x worst initial objectives
    conv_window: int = 20
    conv_tol: float = 1e-4
    seed: int = 0
    out_dir: str = "run"
    epochs: int = 500
    batch: int = 10
    hidden: int = 512
    latent: int = 8
    vae_dtype: str = "float32"
    lowfid_iters: int = 200
    mutation_noise: float = 0.1
    cache_dir: Optional[str] = None  # shared store for initial low-fidelity solves

    def __post_init__(self):
        if self.n_vae is None:
            object.__setattr__(self, "n_vae", self.n_pop)
        if self.ref_point is not None:
            object.__setattr__(self, "ref_point", tuple(float(v) for v in self.ref_point))
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        counts = (self.n, self.n_ini, self.n_pop, self.n_vae, self.t_mut, self.conv_window, self.epochs, self.batch)
        if min(counts) < 1 or self.n_mut < 0 or self.t_max < 0:
            raise ValueError("counts must be positive")
        if self.n_pop > self.n_ini:
            raise ValueError("n_pop must not exceed n_ini")
        if not 0 < self.g_mut_max <= 1:
            raise ValueError("g_mut_max must lie in (0, 1]")

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def load(cls, path) -> "RunConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        if d["ref_point"] is not None:
            d["ref_point"] = list(d["ref_point"])
        return d

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    def replace(self, **kw) -> "RunConfig":
        return dataclasses.replace(self, **kw)

    def evaluations_at(self, t: int) -> int:
        return self.n_ini + t * (self.n_pop + self.n_vae) + (t // self.t_mut) * self.n_mut


@dataclass
class IterationRecord:
    iteration: int
    evaluations: int
    hypervolume: float  # of the non-dominated archive of everything evaluated
    population_hv: float  # of the current population's rank-1 front
    front_size: int
    mode: str
    wall_time: float


@dataclass
class RunState:
    cfg: RunConfig
    population: Population
    archive: np.ndarray  # (k, 2) non-dominated objective vectors
    ref: np.ndarray
    records: list = field(default_factory=list)
    next_id: int = 0
    t: int = 0


def stage_rng(seed: int, stage: int, t: int) -> np.random.Generator:
    """Independent generator per (master seed, stage, iteration)."""
    return np.random.default_rng([seed, stage, t])


def _lowfid_cfg(cfg: RunConfig) -> LowFidConfig:
    return LowFidConfig(max_iters=cfg.lowfid_iters)


def _evaluate(f: DensityField, bc, cfg: RunConfig, cid: int, origin: str) -> Candidate:
    try:
        obj = evaluate_high_fidelity(f, bc, cfg.threshold)
        return Candidate(f, obj, True, id=cid, origin=origin)
    except InfeasibleCandidate as exc:
        log.debug("candidate %d infeasible: %s", cid, exc)
        return Candidate(f, (math.inf, math.inf), False, id=cid, origin=origin)


def _select(cands, cfg: RunConfig, generation: int) -> Population:
    if cfg.mode == "ph":
        return select_ph(cands, cfg.n_pop, cfg.p, cfg.threshold, generation)
    return select_conventional(cands, cfg.n_pop, generation)


# --- initial data --------------------------------------------------------------

_SEED_CACHE: dict = {}


def _seed_key(cfg: RunConfig) -> str:
    return f"lb{cfg.n}_c{cfg.cut}_ini{cfg.n_ini}_it{cfg.lowfid_iters}"


def initial_dataset(cfg: RunConfig):
    """Low-fidelity solves over the seeding grid.

    These depend on the mesh and seeding settings only, not on the seed or
    the selection mode, so they are cached in memory and optionally in
    ``cfg.cache_dir``.
    Returns ``(params, fields, rows)``.
    """
    key = _seed_key(cfg)
    if key in _SEED_CACHE:
        return _SEED_CACHE[key]
    mask = lbracket_mask(cfg.n, cfg.cut)
    params = seeding_grid(cfg.n_ini)
    cache = Path(cfg.cache_dir) / f"{key}.npz" if cfg.cache_dir else None
    if cache is not None and cache.exists():
        data = np.load(cache)
        fields = [DensityField(mask, v) for v in data["values"]]
        meta = data["meta"]
    else:
        bc = lbracket_bc(cfg.n, cfg.cut)
        fields, meta = [], []
        for s in params:
            res = solve_low_fidelity(s, mask, bc, _lowfid_cfg(cfg))
            fields.append(res.field)
            meta.append((res.compliance, res.volume, float(res.converged)))
        meta = np.array(meta)
        if cache is not None:
            cache.parent.mkdir(parents=True, exist_ok=True)
            np.savez(cache, values=np.stack([f.values for f in fields]), meta=meta)
    rows = [
        {"id": i, "r": s.r, "vmax": s.v_max, "compliance": float(m[0]), "volfrac": float(m[1]),
         "converged": bool(m[2])}
        for i, (s, m) in enumerate(zip(params, meta))
    ]
    _SEED_CACHE[key] = (params, fields, rows)
    return _SEED_CACHE[key]


def generate_initial(cfg: RunConfig, out_dir: Optional[Path] = None):
    """Evaluate the seeded designs and select the first population.

    Returns ``(population, all_candidates, manifest_rows)``.
    """
    params, fields, rows = initial_dataset(cfg)
    bc = lbracket_bc(cfg.n, cfg.cut)
    cands = [_evaluate(f, bc, cfg, i, "initial") for i, f in enumerate(fields)]
    rows = [dict(r, F1=c.objectives[0], F2=c.objectives[1], feasible=c.feasible) for r, c in zip(rows, cands)]
    if out_dir is not None:
        write_manifest(rows, out_dir / "initial" / "manifest.csv")
    pop = _select(cands, cfg, 0)
    return pop, cands, rows


def write_manifest(rows, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    keys = ["id", "r", "vmax", "compliance", "volfrac", "converged", "F1", "F2", "feasible"]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(keys)
        for r in rows:
            w.writerow([repr(r[k]) if isinstance(r[k], float) else int(r[k]) if isinstance(r[k], bool) else r[k]
                        for k in keys])


def default_reference(cands: Sequence[Candidate]) -> np.ndarray:
    f = np.array([c.objectives for c in cands if c.feasible], dtype=float)
    if len(f) == 0:
        raise RuntimeError("no feasible initial candidate; cannot fix a reference point")
    return 1.1 * f.max(axis=0)


def _merge_archive(archive: np.ndarray, cands: Sequence[Candidate]) -> np.ndarray:
    pts = [c.objectives for c in cands if c.feasible]
    allp = np.vstack([archive.reshape(-1, 2), np.array(pts, dtype=float).reshape(-1, 2)])
    if len(allp) == 0:
        return allp
    allp = np.unique(allp, axis=0)
    return allp[nondominated_mask(allp)]


def _population_hv(pop: Population, ref) -> tuple[float, int]:
    pts = np.array([c.objectives for c in pop.members if c.feasible], dtype=float).reshape(-1, 2)
    front = pts[nondominated_mask(pts)] if len(pts) else pts
    return hypervolume_2d(front, ref), len(front)


# --- checkpoints ---------------------------------------------------------------

def save_checkpoint(state: RunState, out_dir: Path) -> None:
    ck = out_dir / "checkpoint"
    ck.mkdir(parents=True, exist_ok=True)
    m = state.population.members
    tmp = ck / "state.tmp.npz"
    np.savez(
        tmp,
        values=np.stack([c.field.values for c in m]),
        objectives=np.array([c.objectives for c in m], dtype=float),
        feasible=np.array([c.feasible for c in m]),
        ids=np.array([c.id for c in m]),
        archive=state.archive.reshape(-1, 2),
        ref=state.ref,
    )
    tmp.replace(ck / "state.npz")
    meta = {
        "t": state.t, "next_id": state.next_id, "config": state.cfg.to_dict(),
        "origins": [c.origin for c in m], "mode": state.population.selection_mode,
        "records": [dataclasses.asdict(r) for r in state.records],
    }
    tmp = ck / "state.tmp.json"
    tmp.write_text(json.dumps(meta))
    tmp.replace(ck / "state.json")


def load_checkpoint(cfg: RunConfig, out_dir: Path) -> Optional[RunState]:
    ck = out_dir / "checkpoint"
    if not (ck / "state.json").exists():
        return None
    meta = json.loads((ck / "state.json").read_text())
    saved = RunConfig.from_dict(meta["config"])
    if saved.replace(t_max=cfg.t_max) != cfg:
        raise ValueError(f"{out_dir}: checkpoint was written by a different configuration")
    data = np.load(ck / "state.npz")
    mask = lbracket_mask(cfg.n, cfg.cut)
    members = [
        Candidate(DensityField(mask, v), tuple(o), bool(f), id=int(i), origin=org)
        for v, o, f, i, org in zip(data["values"], data["objectives"], data["feasible"], data["ids"], meta["origins"])
    ]
    pop = Population(members, meta["t"], meta["mode"], list(range(len(members))))
    records = [IterationRecord(**r) for r in meta["records"]]
    return RunState(cfg, pop, data["archive"], data["ref"], records, meta["next_id"], meta["t"])


# --- main loop -----------------------------------------------------------------

def _converged(hv: Sequence[float], window: int, tol: float) -> bool:
    if len(hv) <= window:
        return False
    old, new = hv[-1 - window], hv[-1]
    return abs(new - old) <= tol * max(abs(old), 1e-300)


def _mutants(pop: Population, cfg: RunConfig, bc, t: int, params) -> list[DensityField]:
    rng = stage_rng(cfg.seed, _STAGE_MUT, t)
    ref = reference_density(pop)
    out = []
    for _ in range(cfg.n_mut):
        s = params[int(rng.integers(len(params)))]
        x0 = initial_guess(s, ref.mask, rng, cfg.mutation_noise)
        res = solve_mutation(s, ref, cfg.g_mut_max, bc, _lowfid_cfg(cfg), x0=x0)
        out.append(res.field)
    return out


def iterate(state: RunState, bc, params) -> RunState:
    """One generation: crossover, optional mutation, evaluation, selection."""
    cfg = state.cfg
    t = state.t + 1
    start = time.perf_counter()
    pop = state.population
    fields = crossover(
        pop, cfg.n_vae,
        TrainConfig(epochs=cfg.epochs, batch=cfg.batch, dtype=cfg.vae_dtype),
        SpxConfig(parents=cfg.latent + 1),
        stage_rng(cfg.seed, _STAGE_VAE, t), cfg.threshold, cfg.hidden, cfg.latent,
    )
    origins = ["vae"] * len(fields)
    if cfg.n_mut and t % cfg.t_mut == 0:
        muts = _mutants(pop, cfg, bc, t, params)
        fields += muts
        origins += ["mutation"] * len(muts)
    new = []
    for f, org in zip(fields, origins):
        new.append(_evaluate(f, bc, cfg, state.next_id, org))
        state.next_id += 1
    pool = [dataclasses.replace(c) for c in pop.members] + new
    state.population = _select(pool, cfg, t)
    state.archive = _merge_archive(state.archive, new)
    phv, size = _population_hv(state.population, state.ref)
    state.t = t
    state.records.append(IterationRecord(
        t, cfg.evaluations_at(t), hypervolume_2d(state.archive, state.ref), phv, size,
        state.population.selection_mode, time.perf_counter() - start,
    ))
    return state


def write_outputs(state: RunState, out_dir: Path) -> None:
    with open(out_dir / "hypervolume.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["iteration", "evaluations", "hypervolume"])
        for r in state.records:
            w.writerow([r.iteration, r.evaluations, repr(r.hypervolume)])
    with open(out_dir / "records.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["iteration", "evaluations", "hypervolume", "population_hv", "front_size", "mode", "wall_time"])
        for r in state.records:
            w.writerow([r.iteration, r.evaluations, repr(r.hypervolume), repr(r.population_hv), r.front_size,
                        r.mode, f"{r.wall_time:.3f}"])
    arch = [Candidate(None, tuple(p), True, rank=1, id=k) for k, p in enumerate(state.archive)]
    write_front_csv(arch, out_dir / "pareto.csv")


def _write_front(state: RunState, out_dir: Path) -> None:
    d = out_dir / "fronts"
    d.mkdir(exist_ok=True)
    write_front_csv(state.population.members, d / f"front_{state.t:04d}.csv")


def run(cfg: RunConfig, out_dir=None, resume: bool = True, stop_after: Optional[int] = None) -> RunState:
    """Run the loop, writing artifacts under ``out_dir`` (default
    ``cfg.out_dir``).  With ``resume`` an existing checkpoint is continued.
    ``stop_after`` ends the call after that many new iterations, leaving a
    checkpoint (used to test resumption)."""
    out_dir = Path(out_dir if out_dir is not None else cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    bc = lbracket_bc(cfg.n, cfg.cut)
    params, _, _ = initial_dataset(cfg)
    state = load_checkpoint(cfg, out_dir) if resume else None
    if state is None:
        cfg.save(out_dir / "config.json")
        pop, cands, _ = generate_initial(cfg, out_dir)
        ref = np.asarray(cfg.ref_point, dtype=float) if cfg.ref_point is not None else default_reference(cands)
        archive = _merge_archive(np.zeros((0, 2)), cands)
        phv, size = _population_hv(pop, ref)
        state = RunState(cfg, pop, archive, ref, next_id=len(cands))
        state.records.append(IterationRecord(
            0, cfg.evaluations_at(0), hypervolume_2d(archive, ref), phv, size, pop.selection_mode, 0.0))
        _write_front(state, out_dir)
        save_checkpoint(state, out_dir)
    else:
        state.cfg = cfg
        log.info("resuming %s at iteration %d", out_dir, state.t)
    done = 0
    while state.t < cfg.t_max and not _converged([r.hypervolume for r in state.records], cfg.conv_window, cfg.conv_tol):
        if stop_after is not None and done >= stop_after:
            break
        iterate(state, bc, params)
        done += 1
        _write_front(state, out_dir)
        save_checkpoint(state, out_dir)
        r = state.records[-1]
        log.info("t=%d evals=%d hv=%.6g pop_hv=%.6g mode=%s (%.1fs)", r.iteration, r.evaluations,
                 r.hypervolume, r.population_hv, r.mode, r.wall_time)
    write_outputs(state, out_dir)
    if state.t >= cfg.t_max or stop_after is None:
        d = out_dir / "designs"
        if d.exists():
            shutil.rmtree(d)
        d.mkdir()
        for c in state.population.members:
            if c.rank == 1:
                write_pgm(c.field, d / f"design_{c.id:06d}.pgm", cfg.cut)
    return state


# --- experiment comparison -----------------------------------------------------

def read_hv_csv(path) -> list[tuple[int, int, float]]:
    with open(path, newline="") as fh:
        return [(int(r["iteration"]), int(r["evaluations"]), float(r["hypervolume"])) for r in csv.DictReader(fh)]


def mean_curves(rows: Sequence[dict], t_max: int) -> dict:
    """Per-mode mean hypervolume per iteration.  Runs that stopped early
    hold their last value."""
    out = {}
    for mode in MODES:
        runs: dict = {}
        for r in rows:
            if r["mode"] == mode:
                runs.setdefault(r["seed"], {})[r["iteration"]] = r["hypervolume"]
        if not runs:
            continue
        curves = []
        for hist in runs.values():
            last, c = None, []
            for t in range(t_max + 1):
                last = hist.get(t, last)
                c.append(last)
            curves.append(c)
        out[mode] = np.mean(np.array(curves, dtype=float), axis=0)
    return out


def compare_experiment(base: RunConfig, seeds: Sequence[int], out_dir=None) -> dict:
    """Run both selection modes for every seed and summarise."""
    out_dir = Path(out_dir if out_dir is not None else base.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    # both modes share one reference point fixed by the (mode-independent) initial data
    ref = base.ref_point
    if ref is None:
        _, cands, _ = generate_initial(base.replace(mode="conventional"))
        ref = tuple(float(v) for v in default_reference(cands))
    rows = []
    for mode in MODES:
        for seed in seeds:
            cfg = base.replace(mode=mode, seed=int(seed), ref_point=ref)
            d = out_dir / mode / f"seed_{seed}"
            run(cfg, d)
            for t, ev, hv in read_hv_csv(d / "hypervolume.csv"):
                rows.append({"mode": mode, "seed": int(seed), "iteration": t, "evaluations": ev, "hypervolume": hv})
    with open(out_dir / "comparison.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["mode", "seed", "iteration", "evaluations", "hypervolume"])
        for r in rows:
            w.writerow([r["mode"], r["seed"], r["iteration"], r["evaluations"], repr(r["hypervolume"])])
    curves = mean_curves(rows, base.t_max)
    with open(out_dir / "mean_curves.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["iteration", "evaluations"] + [f"mean_hv_{m}" for m in curves])
        for t in range(base.t_max + 1):
            w.writerow([t, base.evaluations_at(t)] + [repr(float(curves[m][t])) for m in curves])
    final = {m: float(c[-1]) for m, c in curves.items()}
    improvement = None
    if final.get("conventional"):
        improvement = 100.0 * (final["ph"] - final["conventional"]) / final["conventional"]
    summary = {"seeds": [int(s) for s in seeds], "ref_point": list(ref), "final_mean_hv": final,
               "improvement_percent": improvement}
    (out_dir / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    return summary
