"""Experiment orchestration: seeded runs, metrics streams, summaries, plots, evaluation.

Layout of one run::

    <output_dir>/<name>/
        config.yaml
        summary.csv, summary.json
        seed_<s>/
            manifest.json      config echo, versions, code hash, seed
            metrics.jsonl      one record per outer iteration (deterministic)
            timing.jsonl       wall-clock throughput per iteration
            attention.csv      periodic attention diagnostics (MCPO only)
            checkpoint.ckpt    latest training state
"""
from __future__ import annotations

import csv
import hashlib
import json
import logging
import platform
import time
import traceback
from pathlib import Path

import numpy as np

from . import nn
from .config import RunConfig, dump_config
from .envs import make_env
from .trainer import Trainer, load_policy

log = logging.getLogger(__name__)

ATTENTION_COLUMNS = ["update", "iteration", "env_steps", "j_star", "n_slots", "alpha_mean", "beta", "wrote"]
SRC_DIR = Path(__file__).resolve().parent
# modules whose code determines the numbers a training run produces
TRAINING_MODULES = ("autodiff", "checkpoint", "config", "envs", "errors", "mcpo", "nn", "objectives",
                    "rollout", "trainer")


def code_hash() -> str:
    h = hashlib.sha256()
    for name in TRAINING_MODULES:
        path = SRC_DIR / f"{name}.py"
        h.update(path.name.encode())
        h.update(path.read_bytes())
    return h.hexdigest()


def manifest(cfg: RunConfig, seed: int) -> dict:
    import matplotlib
    import yaml
    return {
        "config": cfg.to_dict(),
        "seed": seed,
        "code_hash": code_hash(),
        "versions": {"python": platform.python_version(), "numpy": np.__version__,
                     "pyyaml": yaml.__version__, "matplotlib": matplotlib.__version__},
        "rng": "per-iteration streams from SeedSequence([seed, stream, iteration])",
    }


def run_dir(cfg: RunConfig) -> Path:
    return Path(cfg.output_dir) / cfg.name


def _truncate_jsonl(path: Path, iteration: int) -> None:
    if not path.exists():
        return
    keep = [line for line in path.read_text().splitlines()
            if line and json.loads(line)["iteration"] <= iteration]
    path.write_text("".join(line + "\n" for line in keep))


def _truncate_csv(path: Path, iteration: int) -> None:
    if not path.exists():
        return
    lines = path.read_text().splitlines()
    if not lines:
        return
    rows = [r for r in lines[1:] if int(r.split(",")[1]) <= iteration]
    path.write_text("".join(line + "\n" for line in [lines[0]] + rows))


def train_seed(cfg: RunConfig, seed: int, out: Path, resume: bool = False) -> dict:
    """Train one seed into ``out``; returns the final metrics record."""
    out.mkdir(parents=True, exist_ok=True)
    trainer = Trainer(cfg, seed)
    ckpt = out / "checkpoint.ckpt"
    metrics, timing, attention = out / "metrics.jsonl", out / "timing.jsonl", out / "attention.csv"
    if resume and ckpt.exists():
        trainer.load(ckpt)
        for p in (metrics, timing):
            _truncate_jsonl(p, trainer.iteration)
        _truncate_csv(attention, trainer.iteration)
        log.info("seed %d: resuming at iteration %d (%d env steps)", seed, trainer.iteration, trainer.env_steps)
    else:
        for p in (metrics, timing, attention):
            p.unlink(missing_ok=True)
    (out / "manifest.json").write_text(json.dumps(manifest(cfg, seed), indent=1, sort_keys=True) + "\n")
    if trainer.is_mcpo and not attention.exists():
        attention.write_text(",".join(ATTENTION_COLUMNS) + "\n")

    last = None
    if metrics.exists():
        lines = metrics.read_text().splitlines()
        last = json.loads(lines[-1]) if lines else None
    while trainer.iteration < cfg.n_iterations:
        t0 = time.perf_counter()
        record, att_rows = trainer.run_iteration()
        elapsed = time.perf_counter() - t0
        with open(metrics, "a") as fh:
            fh.write(json.dumps(record) + "\n")
        with open(timing, "a") as fh:
            fh.write(json.dumps({"iteration": record["iteration"], "seconds": round(elapsed, 4),
                                 "steps_per_s": round(cfg.steps_per_iteration / elapsed, 1)}) + "\n")
        if att_rows:
            with open(attention, "a", newline="") as fh:
                w = csv.writer(fh)
                for row in att_rows:
                    w.writerow([row[c] for c in ATTENTION_COLUMNS])
        due = cfg.checkpoint_interval and trainer.iteration % cfg.checkpoint_interval == 0
        if due or trainer.iteration == cfg.n_iterations:
            trainer.save(ckpt)
        last = record
        ret = record["episode_return"]
        log.info("seed %d iter %d/%d steps %d return %s", seed, trainer.iteration, cfg.n_iterations,
                 record["env_steps"], "n/a" if ret is None else f"{ret:.2f}")
    return last


def completed_seed(cfg: RunConfig, seed: int) -> dict | None:
    """Final metrics record of a finished seed whose manifest matches ``cfg`` and the current code.

    Returns None when the seed is missing, unfinished, failed, or stale.
    """
    out = run_dir(cfg) / f"seed_{seed}"
    try:
        man = json.loads((out / "manifest.json").read_text())
        recs = read_metrics(out / "metrics.jsonl")
    except (FileNotFoundError, json.JSONDecodeError):
        return None
    if (out / "error.txt").exists() or man.get("code_hash") != code_hash() or man.get("seed") != seed:
        return None
    def settings(d):  # the output location does not affect results
        return {k: v for k, v in d.items() if k != "output_dir"}
    if settings(man.get("config", {})) != settings(json.loads(json.dumps(cfg.to_dict()))):
        return None
    if len(recs) != cfg.n_iterations or recs[-1]["iteration"] != cfg.n_iterations:
        return None
    return recs[-1]


def train_seconds(cfg: RunConfig, seed: int) -> float:
    """Wall-clock training time of one seed, summed from its timing stream."""
    return float(sum(t["seconds"] for t in read_metrics(run_dir(cfg) / f"seed_{seed}" / "timing.jsonl")))


def format_mean_std(values) -> str:
    v = np.asarray(values, dtype=np.float64)
    return f"{v.mean():.2f}±{v.std():.2f}"


def summarize(cfg: RunConfig, results: dict) -> dict:
    """``results`` maps seed -> final record or an error string."""
    ok = {s: r for s, r in results.items() if isinstance(r, dict)}
    finals = [r["episode_return"] for r in ok.values() if r.get("episode_return") is not None]
    success = [r["success_rate"] for r in ok.values() if r.get("success_rate") is not None]
    summary = {
        "name": cfg.name, "env": cfg.env, "algorithm": cfg.objective.kind,
        "seeds": {str(s): ("ok" if isinstance(r, dict) else f"failed: {r}") for s, r in results.items()},
        "n_ok": len(ok), "n_failed": len(results) - len(ok),
        "final_returns": finals,
        "final_success": success,
        "return_mean": float(np.mean(finals)) if finals else None,
        "return_std": float(np.std(finals)) if finals else None,
        "success_mean": float(np.mean(success)) if success else None,
        "return": format_mean_std(finals) if finals else "n/a",
    }
    return summary


def write_summary(root: Path, summary: dict) -> None:
    (root / "summary.json").write_text(json.dumps(summary, indent=1) + "\n")
    with open(root / "summary.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["name", "env", "algorithm", "n_ok", "n_failed", "return", "success_mean"])
        sm = summary["success_mean"]
        w.writerow([summary["name"], summary["env"], summary["algorithm"], summary["n_ok"],
                    summary["n_failed"], summary["return"], "" if sm is None else f"{sm:.3f}"])


def run(cfg: RunConfig, resume: bool = False, reuse: bool = False) -> Path:
    """Train every seed of ``cfg``; a failing seed is recorded and the others continue.

    With ``reuse``, seeds for which :func:`completed_seed` finds current results are not retrained.
    """
    root = run_dir(cfg)
    root.mkdir(parents=True, exist_ok=True)
    (root / "config.yaml").write_text(dump_config(cfg))
    results = {}
    for seed in cfg.seeds:
        out = root / f"seed_{seed}"
        done = completed_seed(cfg, seed) if reuse else None
        if done is not None:
            log.info("seed %d: reusing finished run in %s", seed, out)
            results[seed] = done
            continue
        try:
            results[seed] = train_seed(cfg, seed, out, resume)
            (out / "error.txt").unlink(missing_ok=True)
        except Exception as exc:  # one seed failing must not abort the others
            out.mkdir(parents=True, exist_ok=True)
            (out / "error.txt").write_text(traceback.format_exc())
            log.error("seed %d failed: %s", seed, exc)
            results[seed] = f"{type(exc).__name__}: {exc}"
    write_summary(root, summarize(cfg, results))
    return root


# --- plotting -----------------------------------------------------------------------------

def read_metrics(path) -> list[dict]:
    return [json.loads(line) for line in Path(path).read_text().splitlines() if line.strip()]


def aggregate(curves: list[tuple[np.ndarray, np.ndarray]]) -> tuple[np.ndarray, np.ndarray, np.ndarray, int, bool]:
    """Mean and std across runs on a common env_steps grid.

    Returns ``(grid, mean, std, n, resampled)``. When the runs' grids differ, every
    curve is linearly interpolated onto the first run's grid clipped to the range
    covered by all runs.
    """
    grids = [c[0] for c in curves]
    same = all(g.shape == grids[0].shape and np.array_equal(g, grids[0]) for g in grids)
    if same:
        grid = grids[0]
        ys = np.stack([c[1] for c in curves])
    else:
        lo, hi = max(g[0] for g in grids), min(g[-1] for g in grids)
        grid = grids[0][(grids[0] >= lo) & (grids[0] <= hi)]
        if grid.size == 0:
            grid = np.array([lo])
        ys = np.stack([np.interp(grid, g, y) for g, y in curves])
    return grid, ys.mean(0), ys.std(0), len(curves), not same


def plot(paths: list, out, metric: str = "episode_return") -> tuple[Path, Path]:
    """Mean curve with a +-std band across runs; writes ``out`` (SVG) and ``out`` .csv."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    if not paths:
        raise ValueError("plot needs at least one metrics file")
    curves = []
    for p in paths:
        recs = [r for r in read_metrics(p) if r.get(metric) is not None]
        if recs:
            curves.append((np.array([r["env_steps"] for r in recs], float),
                           np.array([r[metric] for r in recs], float)))
    if not curves:
        raise ValueError(f"no '{metric}' values in the given metrics files")
    grid, mean, std, n, resampled = aggregate(curves)
    if resampled:
        log.warning("env_steps grids differ across runs; resampled onto a common grid of %d points", grid.size)
    out = Path(out)
    out.parent.mkdir(parents=True, exist_ok=True)
    csv_path = out.with_suffix(".csv")
    with open(csv_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["env_steps", "mean", "std", "n"])
        for row in zip(grid, mean, std):
            w.writerow([int(row[0]), repr(float(row[1])), repr(float(row[2])), n])
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(grid, mean, lw=1.5)
    ax.fill_between(grid, mean - std, mean + std, alpha=0.25)
    ax.set_xlabel("env steps")
    ax.set_ylabel(metric)
    ax.set_title(f"{metric} (n={n})")
    fig.tight_layout()
    fig.savefig(out, format=out.suffix.lstrip(".") or "svg")
    plt.close(fig)
    return out, csv_path


# --- evaluation ---------------------------------------------------------------------------

def evaluate(checkpoint_path, episodes: int, seed: int = 0, greedy: bool = True) -> dict:
    """Roll out the checkpointed policy for ``episodes`` episodes (greedy actions by default)."""
    if episodes < 1:
        raise ValueError("episodes must be >= 1")
    header, arch, theta = load_policy(checkpoint_path)
    env = make_env(header["env"])
    rng = np.random.default_rng(seed)
    returns, lengths = [], []
    for ep in range(episodes):
        obs, done, total, n = env.reset(seed + ep), False, 0.0, 0
        while not done:
            dist, _ = nn.forward(theta, arch, obs)
            action = nn.mode(dist) if greedy else nn.sample(dist, rng)
            obs, r, done = env.step(action)
            total += r
            n += 1
        returns.append(total)
        lengths.append(n)
    r = np.array(returns)
    return {"episodes": episodes, "mean_return": float(r.mean()), "std_return": float(r.std()),
            "success_rate": float(np.mean(r > 0)), "mean_length": float(np.mean(lengths)),
            "env": header["env"], "algorithm": header["algorithm"],
            "env_steps": header["counters"]["env_steps"]}
