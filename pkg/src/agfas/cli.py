"""Command-line driver: corpus -> generator -> cue store -> classifier -> reports.

Every command resolves a ``RunConfig`` (defaults, then ``--config``, then
flags), works inside ``<out>/<config hash>/`` and writes the resolved
config there first.  Downstream commands refuse to run until the artifacts
they read exist.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import traceback
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import torch

from . import eval as ev
from .checkpoint import config_hash
from .cue import CueConfig, CueStore, cache_cues, dump_cue_grid
from .dgtrain import FASConfig, train_fas, write_log
from .diffusion import DFGConfig, load_dfg, save_dfg, train_dfg
from .oanet import save_oanet
from .synthdata import (ATTACK_TYPES, SEEN_ATTACKS, build_corpus, build_extra_real_pool, build_loo_split,
                        default_domains, export_corpus, load_exported, samples_from_records)

log = logging.getLogger("agfas")

COMMANDS = ("gen-data", "train-dfg", "cache-cues", "train-fas", "eval-loo", "eval-unknown",
            "ablate-tsteps", "ablate-data", "verify-theory", "report")


class PrerequisiteError(RuntimeError):
    exit_code = 2


class ConfigMismatchError(RuntimeError):
    exit_code = 3


class RunLockedError(RuntimeError):
    exit_code = 3


class TheoryFailure(RuntimeError):
    exit_code = 4


@dataclass
class RunConfig:
    """Every knob of the pipeline.  Flat and JSON-serialisable."""

    seed: int = 0
    # corpus
    n_subjects: int = 60
    attacks_per_real: int = 2
    strength_min: float = 0.3
    strength_max: float = 0.7
    pool_size: int = 2048
    pool_fraction: float = 1.0
    unknown_subjects: int = 20
    # generator
    dfg_steps: int = 3000
    dfg_batch_size: int = 32
    dfg_lr: float = 2e-3
    dfg_weight_decay: float = 0.01
    dfg_base_channels: int = 32
    dfg_emb_dim: int = 64
    k_id: int = 4
    d_id: int = 16
    T: int = 100
    beta_min: float = 1e-4
    beta_max: float = 0.05
    use_identity: bool = True
    # cues
    t_hat: int = 80
    cue_steps: int = 10
    mask_background: bool = False
    # classifier and training
    fas_steps: int = 300
    fas_batch_size: int = 32
    fas_optimizer: str = "adamw"
    fas_lr: float = 1e-3
    fas_momentum: float = 0.9
    fas_weight_decay: float = 0.05
    fas_lr_decay_every: int = 200
    fas_lr_decay: float = 0.5
    w_adv: float = 0.1
    w_trip: float = 1.0
    margin: float = 0.1
    grl_lambda: float = 1.0
    val_fraction: float = 0.1
    eval_every: int = 50
    patch: int = 8
    d_model: int = 64
    depth: int = 3
    heads: int = 4
    cross_heads: int = 4
    mlp_ratio: float = 2.0
    cue_grid: int = 4
    d_cue: int = 32
    use_cue: bool = True
    use_extra_pool: bool = True
    compare_baseline: bool = True
    # evaluation
    threshold_policy: str = "eer"
    held_out: int | None = None
    t_hat_list: list = field(default_factory=lambda: [100, 80, 60, 40, 20])
    fractions: list = field(default_factory=lambda: [0.25, 0.5, 1.0])
    # theory
    theory_kl_samples: int = 100_000
    theory_pairs: int = 200
    theory_images: int = 64
    theory_slack: float = 0.25

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ValueError(f"unknown config keys: {unknown}")
        return cls(**d)

    @classmethod
    def load(cls, path: str | Path) -> "RunConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def to_dict(self) -> dict:
        return asdict(self)

    def hash(self) -> str:
        return config_hash(self.to_dict())

    def dfg_config(self) -> DFGConfig:
        return DFGConfig(steps=self.dfg_steps, batch_size=self.dfg_batch_size, lr=self.dfg_lr,
                         weight_decay=self.dfg_weight_decay, seed=self.seed,
                         base_channels=self.dfg_base_channels, emb_dim=self.dfg_emb_dim, k_id=self.k_id,
                         d_id=self.d_id, T=self.T, beta_min=self.beta_min, beta_max=self.beta_max,
                         use_identity=self.use_identity, log_every=0)

    def cue_config(self) -> CueConfig:
        return CueConfig(t_hat=self.t_hat, n_steps=self.cue_steps, seed=self.seed,
                         mask_background=self.mask_background)

    def fas_config(self, use_cue: bool | None = None) -> FASConfig:
        model = dict(patch=self.patch, d_model=self.d_model, depth=self.depth, heads=self.heads,
                     cross_heads=self.cross_heads, mlp_ratio=self.mlp_ratio, cue_grid=self.cue_grid,
                     d_cue=self.d_cue)
        return FASConfig(steps=self.fas_steps, batch_size=self.fas_batch_size, optimizer=self.fas_optimizer,
                         lr=self.fas_lr, momentum=self.fas_momentum, weight_decay=self.fas_weight_decay,
                         lr_decay_every=self.fas_lr_decay_every, lr_decay=self.fas_lr_decay,
                         w_adv=self.w_adv, w_trip=self.w_trip, margin=self.margin, grl_lambda=self.grl_lambda,
                         val_fraction=self.val_fraction, eval_every=self.eval_every, seed=self.seed,
                         use_cue=self.use_cue if use_cue is None else use_cue, model=model)

    def eval_config(self, use_cue: bool | None = None) -> ev.EvalConfig:
        return ev.EvalConfig(self.fas_config(use_cue), self.threshold_policy, self.use_extra_pool)

    def held_out_list(self):
        return None if self.held_out is None else [self.held_out]


def bundled_config(name: str = "tiny") -> Path:
    return Path(__file__).with_name("configs") / f"{name}.json"


# --------------------------------------------------------------------------
# run directory

class RunLock:
    """Exclusive writer lock: a ``.lock`` file holding the owner's pid."""

    def __init__(self, run_dir: Path):
        self.path = run_dir / ".lock"

    def __enter__(self):
        self.path.parent.mkdir(parents=True, exist_ok=True)
        for _ in range(2):
            try:
                fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
            except FileExistsError:
                if self._stale():
                    self.path.unlink(missing_ok=True)
                    continue
                raise RunLockedError(f"run directory {self.path.parent} is locked by another process")
            with os.fdopen(fd, "w") as fh:
                fh.write(str(os.getpid()))
            return self
        raise RunLockedError(f"could not lock {self.path.parent}")

    def _stale(self) -> bool:
        try:
            pid = int(self.path.read_text().strip() or 0)
            os.kill(pid, 0)
        except (ValueError, ProcessLookupError):
            return True
        except PermissionError:
            return False
        return False

    def __exit__(self, *exc):
        self.path.unlink(missing_ok=True)


class Run:
    def __init__(self, cfg: RunConfig, out: str | Path):
        self.cfg = cfg
        self.dir = Path(out) / cfg.hash()

    def p(self, *parts) -> Path:
        return self.dir.joinpath(*parts)

    def write_config(self):
        path = self.p("config.json")
        text = json.dumps(self.cfg.to_dict(), indent=2, sort_keys=True) + "\n"
        if path.exists() and path.read_text() != text:
            existing = RunConfig.from_dict(json.loads(path.read_text()))
            if existing.hash() != self.cfg.hash():
                raise ConfigMismatchError(f"{path} holds a different configuration; refusing to overwrite")
        self.dir.mkdir(parents=True, exist_ok=True)
        path.write_text(text)

    def require(self, path: Path, stage: str):
        if not path.exists():
            raise PrerequisiteError(f"missing {path.relative_to(self.dir)}; run `{stage}` first")

    # artifacts -----------------------------------------------------------
    def split(self, name: str):
        self.require(self.p("data", name, "metadata.jsonl"), "gen-data")
        return samples_from_records(load_exported(self.p("data", name)))

    def dfg(self):
        self.require(self.p("dfg", "manifest.json"), "train-dfg")
        return load_dfg(self.p("dfg"))

    def cues(self, samples) -> CueStore:
        self.require(self.p("cues", "index.json"), "cache-cues")
        store = CueStore(self.p("cues"))
        missing = [s.source_id for s in samples if s.source_id not in store]
        if missing:
            raise PrerequisiteError(f"cue store lacks {len(missing)} samples; run `cache-cues` first")
        return store


# --------------------------------------------------------------------------
# commands

def split_builders(c: RunConfig) -> dict:
    """Lazy builders for the three data splits of a run: FAS corpus, real-only pool, unknown-attack test set."""
    domains = default_domains()
    return {
        "corpus": lambda: build_corpus(c.n_subjects, domains, c.attacks_per_real, c.seed, SEEN_ATTACKS,
                                       (c.strength_min, c.strength_max)),
        "pool": lambda: build_extra_real_pool(c.pool_size, c.seed + 1),
        "unknown": lambda: build_corpus(c.unknown_subjects, domains, 3, c.seed + 2, ATTACK_TYPES[1:],
                                        (c.strength_min, c.strength_max), subject_offset=c.n_subjects),
    }


def cmd_gen_data(run: Run) -> dict:
    domains = default_domains()
    out = {}
    for name, make in split_builders(run.cfg).items():
        if run.p("data", name, "metadata.jsonl").exists():
            out[name] = "cached"
            continue
        samples = make()
        export_corpus(samples, run.p("data", name))
        out[name] = len(samples)
    (run.p("data", "domains.json")).write_text(json.dumps([d.to_dict() for d in domains], indent=2))
    return out


def cmd_train_dfg(run: Run) -> dict:
    if run.p("dfg", "manifest.json").exists():
        return {"dfg": "cached"}
    pool = ev.pool_fraction(run.split("pool"), run.cfg.pool_fraction)
    dfg, curve = train_dfg(pool, run.cfg.dfg_config())
    save_dfg(dfg, run.p("dfg"), run.cfg.dfg_config())
    np.savetxt(run.p("dfg", "loss.csv"), np.asarray(curve), fmt="%.6f", header="loss", comments="")
    return {"dfg_steps": len(curve), "final_loss": float(np.mean(curve[-100:]))}


def _cue_samples(run: Run):
    return run.split("corpus") + run.split("pool") + run.split("unknown")


def cmd_cache_cues(run: Run) -> dict:
    dfg = run.dfg()
    samples = _cue_samples(run)
    index = run.p("cues", "index.json")
    before = index.stat().st_mtime_ns if index.exists() else None
    store = cache_cues(samples, dfg, run.cfg.cue_config(), CueStore(run.p("cues")),
                       dfg_hash=dfg.manifest.get("config_hash", ""))
    grid = run.p("cues", "cue_grid.png")
    if not grid.exists() or index.stat().st_mtime_ns != before:
        fakes = [s for s in samples if s.is_fake][:16]
        reals = [s for s in samples if not s.is_fake][:16]
        dump_cue_grid([store.get(s.source_id) for s in reals + fakes], grid)
    return {"cues": len(store)}


def _stores(run: Run, samples, use_cue: bool):
    return run.cues(samples) if use_cue else None


def cmd_train_fas(run: Run) -> dict:
    c = run.cfg
    corpus, pool = run.split("corpus"), run.split("pool")
    train = corpus if c.held_out is None else build_loo_split(corpus, c.held_out)[0]
    pool = pool if c.use_extra_pool else None
    store = _stores(run, train + (pool or []), c.use_cue)
    model, rows = train_fas(train, pool, store, c.fas_config())
    tag = "all" if c.held_out is None else f"D{c.held_out}"
    out = run.p("fas", tag)
    save_oanet(model, out, fas_config=asdict(c.fas_config()))
    write_log(rows, out / "train_log.csv")
    return {"fas": str(out.relative_to(run.dir)), "steps": len(rows)}


def _write_report(run: Run, name: str, rep):
    run.p("reports").mkdir(parents=True, exist_ok=True)
    rep.to_csv(run.p("reports", f"{name}.csv"))
    run.p("reports", f"{name}.txt").write_text(rep.to_text() + "\n")
    if hasattr(rep, "to_dict"):
        run.p("reports", f"{name}.json").write_text(json.dumps(rep.to_dict(), indent=2, sort_keys=True) + "\n")


def cmd_eval_loo(run: Run) -> dict:
    c = run.cfg
    corpus, pool = run.split("corpus"), run.split("pool")
    variants = [("loo", c.use_cue)] + ([("loo_baseline", False)] if c.compare_baseline and c.use_cue else [])
    out = {}
    for name, use_cue in variants:
        store = _stores(run, corpus + (pool if c.use_extra_pool else []), use_cue)
        rep = ev.run_loo(corpus, pool, store, c.eval_config(use_cue), c.held_out_list(),
                         protocol="leave-one-out" + ("" if use_cue else " (no cue)"))
        _write_report(run, name, rep)
        out[name] = {"mean_hter_percent": rep.mean_hter, "mean_auc_percent": rep.mean_auc}
    return out


def cmd_eval_unknown(run: Run) -> dict:
    c = run.cfg
    corpus, pool, test = run.split("corpus"), run.split("pool"), run.split("unknown")
    variants = [("unknown", c.use_cue)] + ([("unknown_baseline", False)] if c.compare_baseline and c.use_cue else [])
    out = {}
    for name, use_cue in variants:
        store = _stores(run, corpus + test + (pool if c.use_extra_pool else []), use_cue)
        rep = ev.run_unknown_attack(corpus, test, pool, store, c.eval_config(use_cue))
        _write_report(run, name, rep)
        out[name] = {"auc_percent": rep.legs[0].auc_percent, **rep.extra}
    return out


def cmd_ablate_tsteps(run: Run) -> dict:
    c = run.cfg
    dfg, corpus, pool = run.dfg(), run.split("corpus"), run.split("pool")
    table = ev.ablate_timesteps(c.t_hat_list, corpus, pool, dfg, c.cue_config(), c.eval_config(True),
                                c.held_out_list())
    _write_report(run, "ablate_tsteps", table)
    return {"t_hat": table.column("t_hat"), "mean_hter_percent": table.column("mean_hter_percent")}


def cmd_ablate_data(run: Run) -> dict:
    c = run.cfg
    corpus, pool = run.split("corpus"), run.split("pool")
    dfgs = {}
    if run.p("dfg", "manifest.json").exists():
        dfgs[c.pool_fraction] = run.dfg()
    table = ev.ablate_data_fraction(c.fractions, corpus, pool, c.dfg_config(), c.cue_config(),
                                    c.eval_config(True), c.held_out_list(), dfgs)
    _write_report(run, "ablate_data", table)
    return {"fraction": table.column("fraction"), "mean_hter_percent": table.column("mean_hter_percent")}


def cmd_verify_theory(run: Run) -> dict:
    from . import theory as th
    from .diffusion import images_to_tensor

    c = run.cfg
    sched = c.dfg_config().schedule()
    rep = th.TheoryReport()
    ts = sorted({max(1, round(f * c.T)) for f in (0.05, 0.2, 0.4, 0.6, 0.8)})
    rep.extend(th.kl_grid_check(sched, ts, [0.1, 0.5, 1.0, 2.0], n_samples=c.theory_kl_samples, seed=c.seed))
    rep.extend(th.telescoping_check(sched))
    rep.extend(th.oracle_roundtrip_check(sched, seed=c.seed))
    skipped = []
    if run.p("dfg", "manifest.json").exists():
        dfg = run.dfg()
        x = images_to_tensor(run.split("corpus")[: 4 * c.theory_images:4])
        t_list = [t for t in range(max(1, c.T // 10), int(0.8 * c.T) + 1, max(1, c.T // 10))]
        curve = th.reconstruction_error_curve(dfg.predict, x, dfg.identity_tokens(x), sched, t_list,
                                              n_steps=c.cue_steps, slack=c.theory_slack, seed=c.seed)
        rep.extend(curve.report(c.theory_slack))
        real, fake = th.spoof_pairs(c.theory_pairs, c.seed)
        rep.add(th.fake_cue_bound_check(dfg.predict, real, fake, dfg.identity_tokens(real),
                                        dfg.identity_tokens(fake), sched, c.t_hat, c.cue_steps, seed=c.seed))
    else:
        skipped.append("empirical generator bounds (no dfg checkpoint; run `train-dfg` to include them)")
    run.p("theory").mkdir(parents=True, exist_ok=True)
    run.p("theory", "report.json").write_text(rep.to_json() + "\n")
    run.p("theory", "summary.txt").write_text(rep.summary() + "\n" + "".join(f"skipped: {s}\n" for s in skipped))
    if not rep.passed:
        raise TheoryFailure(f"{sum(not ch.passed for ch in rep.checks)} theory checks failed; "
                            f"see {run.p('theory', 'summary.txt')}")
    return {"checks": len(rep.checks), "passed": True, "skipped": skipped}


def cmd_report(run: Run) -> dict:
    parts = []
    for path in sorted(run.p("reports").glob("*.txt")) if run.p("reports").exists() else []:
        parts.append(path.read_text())
    if run.p("theory", "summary.txt").exists():
        parts.append("theory checks\n" + run.p("theory", "summary.txt").read_text())
    if not parts:
        raise PrerequisiteError("no reports found; run `eval-loo` or `verify-theory` first")
    text = f"run {run.dir.name}\n\n" + "\n".join(parts)
    run.p("summary.txt").write_text(text)
    return {"summary": str(run.p("summary.txt"))}


HANDLERS = {
    "gen-data": cmd_gen_data, "train-dfg": cmd_train_dfg, "cache-cues": cmd_cache_cues,
    "train-fas": cmd_train_fas, "eval-loo": cmd_eval_loo, "eval-unknown": cmd_eval_unknown,
    "ablate-tsteps": cmd_ablate_tsteps, "ablate-data": cmd_ablate_data,
    "verify-theory": cmd_verify_theory, "report": cmd_report,
}


# --------------------------------------------------------------------------
# entry point

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="agfas", description=__doc__.splitlines()[0])
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", help="JSON file of RunConfig overrides")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", default="runs", help="parent directory of run directories")
    p.add_argument("--t-hat", dest="t_hat", type=int)
    p.add_argument("--fraction", dest="pool_fraction", type=float, help="fraction of the real pool for the generator")
    p.add_argument("--held-out", dest="held_out", type=int, help="restrict protocols to one held-out domain")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def resolve_config(args) -> RunConfig:
    d = RunConfig().to_dict()
    if args.config:
        d.update(json.loads(Path(args.config).read_text()))
    for key in ("seed", "t_hat", "pool_fraction", "held_out"):
        v = getattr(args, key)
        if v is not None:
            d[key] = v
    return RunConfig.from_dict(d)


def _error_record(command: str, exc: BaseException) -> dict:
    return {"status": "error", "command": command, "error": type(exc).__name__, "message": str(exc),
            "exit_code": getattr(exc, "exit_code", 1)}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    torch.set_num_threads(1)
    run = None
    try:
        cfg = resolve_config(args)
        run = Run(cfg, args.out)
        with RunLock(run.dir):
            run.write_config()
            result = HANDLERS[args.command](run)
        record = {"status": "ok", "command": args.command, "run_dir": str(run.dir), "result": result}
        print(json.dumps(record, default=str))
        return 0
    except Exception as exc:  # every failure leaves a machine-readable record
        record = _error_record(args.command, exc)
        if args.verbose:
            traceback.print_exc()
        print(json.dumps(record), file=sys.stderr)
        if run is not None and run.dir.exists():
            with open(run.dir / "errors.jsonl", "a") as fh:
                fh.write(json.dumps(record) + "\n")
        return record["exit_code"]


if __name__ == "__main__":
    sys.exit(main())
