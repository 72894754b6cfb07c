"""Config-driven train -> account -> bound -> attack runs, plus grid sweeps."""

from __future__ import annotations

import copy
import csv
import hashlib
import itertools
import json
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from datetime import datetime, timezone
from functools import lru_cache
from importlib import resources
from multiprocessing import get_context
from pathlib import Path
from typing import Optional, Union

import jsonschema
import numpy as np

from reconbound.accounting import (
    AccountingParams,
    BoundInputs,
    fil_accountant_run,
    mse_lower_bound_rdp,
    output_perturbation_fim,
    rdp_dpsgd,
    rdp_output_perturbation,
)
from reconbound.attacks import evaluate_output_perturbation_attack
from reconbound.data import (
    DataError,
    Dataset,
    balanced_subset,
    filter_binary,
    load_idx_dataset,
    make_synthetic,
    split,
)
from reconbound.mechanisms import SgdConfig, output_perturbation_train, private_sgd_train, save_checkpoint
from reconbound.models import ModelSpec, accuracy, train_erm
from reconbound.report import PrivacyReport
from reconbound.rng import Stream, substream

STAGES = ("train", "account", "bounds", "attack")


class ConfigError(ValueError):
    """Invalid run configuration; the CLI maps it to exit code 2."""


@lru_cache(maxsize=None)
def config_schema() -> dict:
    return json.loads(resources.files("reconbound").joinpath("schemas/config.schema.json").read_text())


DEFAULTS = {
    "seed": 0,
    "model": {"hidden": [], "activation": "tanh", "l2": 0.0},
    "mechanism": {"clip": 1.0, "lr": 0.1, "iters": 100, "batch": 50, "momentum": 0.5, "delta": None},
    "accounting": {"kappa_policy": "amplified", "coords_per_step": 50, "runs": 10, "spectral": False,
                   "engine": "structured"},
    "attack": {"enabled": True, "trials": 1000},
    "output": {"dir": "reconbound-out"},
    "unsafe_reveal": False,
}


def normalize_config(cfg: dict) -> dict:
    """Validate against the schema, fill defaults and check referenced files exist."""
    try:
        jsonschema.validate(cfg, config_schema())
    except jsonschema.ValidationError as exc:
        raise ConfigError(f"invalid config at {'/'.join(map(str, exc.absolute_path)) or '<root>'}: "
                          f"{exc.message}") from exc
    out = copy.deepcopy(cfg)
    for key, default in DEFAULTS.items():
        if isinstance(default, dict):
            out[key] = {**default, **out.get(key, {})}
        else:
            out.setdefault(key, default)
    ds = out["dataset"]
    if ds["source"] == "idx":
        for k in ("images", "labels"):
            if not Path(ds[k]).is_file():
                raise DataError(f"dataset file not found: {ds[k]}")
    return out


def load_config(path: Union[str, Path]) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from exc


def load_datasets(cfg: dict) -> tuple[Dataset, Optional[Dataset]]:
    ds_cfg, seed = cfg["dataset"], cfg["seed"]
    if ds_cfg["source"] == "synthetic":
        n_test = ds_cfg.get("n_test", 0)
        full = make_synthetic(ds_cfg["n"] + n_test, ds_cfg["dim"], ds_cfg.get("num_classes", 2), seed=seed,
                              max_norm=ds_cfg.get("max_norm"))
        if n_test == 0:
            return full, None
        return split(full, ds_cfg["n"], n_test, seed)
    full = load_idx_dataset(ds_cfg["images"], ds_cfg["labels"])
    if ds_cfg.get("classes"):
        full = filter_binary(full, tuple(ds_cfg["classes"]))
    if ds_cfg.get("per_class"):
        return balanced_subset(full, ds_cfg["per_class"], seed), None
    n_train = ds_cfg.get("n_train", len(full))
    n_test = ds_cfg.get("n_test", 0)
    train, test = split(full, n_train, n_test, seed)
    return train, (test if n_test else None)


def model_spec(cfg: dict, train: Dataset) -> ModelSpec:
    m = cfg["model"]
    return ModelSpec(kind=m["kind"], input_dim=train.dim, num_classes=max(2, int(train.y.max()) + 1),
                     hidden=tuple(m["hidden"]), activation=m["activation"], l2=m["l2"])


def sgd_config(cfg: dict) -> SgdConfig:
    mech = cfg["mechanism"]
    return SgdConfig(iters=mech["iters"], batch_size=mech["batch"], sigma=mech["sigma"], clip=mech["clip"],
                     lr=mech["lr"], momentum=mech["momentum"], delta_total=mech["delta"], seed=cfg["seed"])


def accounting_params(cfg: dict) -> AccountingParams:
    a = cfg["accounting"]
    return AccountingParams(kappa_policy=a["kappa_policy"], coords_per_step=a["coords_per_step"],
                            runs=a["runs"], spectral=a["spectral"], engine=a["engine"],
                            delta_total=cfg["mechanism"]["delta"], seed=cfg["seed"])


def _spearman(a: np.ndarray, b: np.ndarray) -> Optional[float]:
    if a.size < 2:
        return None
    ra = np.argsort(np.argsort(a, kind="stable"), kind="stable").astype(float)
    rb = np.argsort(np.argsort(b, kind="stable"), kind="stable").astype(float)
    if ra.std() == 0 or rb.std() == 0:
        return None
    return float(np.corrcoef(ra, rb)[0, 1])


@dataclass
class PipelineResult:
    report: Optional[PrivacyReport]
    out_dir: Path
    failed_stage: Optional[str] = None
    error: Optional[BaseException] = None


def _report_config(cfg: dict) -> dict:
    """Config as embedded in the report: without output locations so reruns elsewhere compare equal."""
    c = copy.deepcopy(cfg)
    c.pop("output", None)
    c.pop("grid", None)
    return c


def _digest(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _write_manifest(out: Path, stages: dict, files: list[Path], failed: Optional[str], error: Optional[str],
                    started: str) -> None:
    manifest = {
        "started": started,
        "finished": datetime.now(timezone.utc).isoformat(),
        "stages": stages,
        "failed_stage": failed,
        "error": error,
        "files": {p.name: _digest(p) for p in files if p.exists()},
    }
    (out / "MANIFEST.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def run_pipeline(cfg: dict, stages=STAGES, out_dir: Union[str, Path, None] = None,
                 raise_errors: bool = True) -> PipelineResult:
    """Run the requested stages and write ``report.json``, CSVs and ``MANIFEST.json``.

    A failing stage still leaves the artifacts produced so far plus a MANIFEST
    naming the stage; the exception is re-raised unless ``raise_errors`` is off.
    Timestamps appear only in the MANIFEST, so reports are byte-identical
    across reruns of the same config.
    """
    cfg = normalize_config(cfg)
    out = Path(out_dir if out_dir is not None else cfg["output"]["dir"])
    out.mkdir(parents=True, exist_ok=True)
    started = datetime.now(timezone.utc).isoformat()
    status = {s: "skipped" for s in STAGES}
    files: list[Path] = []
    stage = "data"
    state: dict = {}
    try:
        train, test = load_datasets(cfg)
        spec = model_spec(cfg, train)
        mech = cfg["mechanism"]
        kind = mech["kind"]
        seed = cfg["seed"]
        for stage in STAGES:
            if stage not in stages:
                continue
            if stage == "train":
                _stage_train(cfg, kind, spec, train, test, state)
                files.append(save_checkpoint(out / "model.f64", state["w"], spec, step=mech.get("iters", 0)
                                             if kind == "dp-sgd" else 0, seed=seed))
                files.append(out / "model.f64.json")
            elif stage == "account":
                _stage_account(cfg, kind, spec, train, test, state)
            elif stage == "bounds":
                diam = train.diameters
                state["rdp_mse_bound"] = mse_lower_bound_rdp(state["epsilon2"], BoundInputs(diam=diam))
                state["perfect_privacy_mse"] = float(np.mean(diam ** 2)) if diam.size else 0.0
            elif stage == "attack":
                _stage_attack(cfg, kind, spec, train, state)
            status[stage] = "ok"
        report = None
        if "fil" in state:
            report = _build_report(cfg, kind, spec, train, state)
            files.extend(report.write(out))
        _write_manifest(out, status, files, None, None, started)
        return PipelineResult(report, out)
    except Exception as exc:
        if stage in status:
            status[stage] = "failed"
        _write_manifest(out, status, files, stage, f"{type(exc).__name__}: {exc}", started)
        if raise_errors:
            raise
        return PipelineResult(None, out, stage, exc)


def _stage_train(cfg, kind, spec, train, test, state):
    mech, seed = cfg["mechanism"], cfg["seed"]
    if kind == "output-perturb":
        if spec.kind != "logistic":
            raise ConfigError("output perturbation is defined for logistic regression only")
        state["w_star"] = train_erm(spec, train)
        state["w"] = output_perturbation_train(spec, train, mech["sigma"], substream(seed, Stream.RELEASE, 1 << 20),
                                               w_star=state["w_star"])
    else:
        state["w"], _ = private_sgd_train(spec, train, sgd_config(cfg))
    state["train_accuracy"] = accuracy(spec, state["w"], train)
    state["test_accuracy"] = accuracy(spec, state["w"], test) if test is not None else None


def _stage_account(cfg, kind, spec, train, test, state):
    mech = cfg["mechanism"]
    n = len(train)
    if kind == "output-perturb":
        state["epsilon2"] = rdp_output_perturbation(n, spec.l2, mech["sigma"])
        state["rdp_policy"] = "output-perturbation"
        fim = output_perturbation_fim(spec, train, mech["sigma"], state["w_star"],
                                      spectral=cfg["accounting"]["spectral"], seed=cfg["seed"])
        state["fil"] = dict(trace=fim.trace, spectral=fim.spectral, visits=np.ones(n), kappa=1.0,
                            kappa_policy="none", runs=1,
                            meta={"spectral_converged": fim.spectral_converged})
        return
    sgd = sgd_config(cfg)
    q = sgd.sampling_ratio(n)
    state["epsilon2"] = rdp_dpsgd(q, sgd.sigma, sgd.iters)
    state["rdp_policy"] = "subsampled-gaussian-alpha2"
    params = accounting_params(cfg)
    res = fil_accountant_run(spec, train, sgd, params)
    est = res.estimate
    # accuracy averaged over the accountant's runs supersedes the single training run
    state["train_accuracy"] = float(np.mean([accuracy(spec, w, train) for w in res.weights]))
    if test is not None:
        state["test_accuracy"] = float(np.mean([accuracy(spec, w, test) for w in res.weights]))
    state["fil"] = dict(trace=est.trace_sum, spectral=est.spectral_est, visits=est.visit_count / params.runs,
                        kappa=est.kappa, kappa_policy=params.kappa_policy, runs=params.runs,
                        meta={**est.meta, "spectral_converged": est.spectral_converged})


def _stage_attack(cfg, kind, spec, train, state):
    if not cfg["attack"]["enabled"] or kind != "output-perturb":
        state["attack"] = None
        return
    trials = cfg["attack"]["trials"]
    res = evaluate_output_perturbation_attack(state["w_star"], train, cfg["mechanism"]["sigma"], spec.l2,
                                              trials=trials, seed=cfg["seed"])
    trace = state["fil"]["trace"]
    bound = np.where(trace > 0, train.dim / np.where(trace > 0, trace, 1.0), np.inf)
    small = bound <= 1.0
    state["attack_mse"], state["attack_stderr"] = res.mse, res.stderr
    state["attack"] = {
        "kind": "glm-stationarity",
        "trials": trials,
        "mean_mse": float(res.mse.mean()),
        "fallback_rate": float(res.fallback_rate.mean()),
        "samples_with_bound_le_1": int(small.sum()),
        "bound_consistency": float(np.mean(res.mse[small] >= bound[small])) if small.any() else None,
        "spearman": _spearman(bound[small], res.mse[small]) if small.any() else None,
    }


def _build_report(cfg, kind, spec, train, state) -> PrivacyReport:
    fil = state["fil"]
    return PrivacyReport(
        mechanism=kind,
        model={"kind": spec.kind, "num_params": spec.num_params, "train_accuracy": state.get("train_accuracy"),
               "test_accuracy": state.get("test_accuracy")},
        epsilon2=state["epsilon2"],
        rdp_policy=state["rdp_policy"],
        dim=train.dim,
        kappa=fil["kappa"],
        kappa_policy=fil["kappa_policy"],
        runs=fil["runs"],
        trace=np.asarray(fil["trace"]),
        spectral=np.asarray(fil["spectral"], dtype=np.float64),
        visits=np.asarray(fil["visits"], dtype=np.float64),
        rdp_mse_bound=state.get("rdp_mse_bound", float("nan")),
        perfect_privacy_mse=state.get("perfect_privacy_mse", float("nan")),
        fil_meta=fil["meta"],
        attack=state.get("attack"),
        attack_mse=state.get("attack_mse"),
        attack_stderr=state.get("attack_stderr"),
        config=_report_config(cfg),
        reveal=cfg["unsafe_reveal"],
    )


# ---------------------------------------------------------------------------
# grid mode

def _set_path(cfg: dict, dotted: str, value) -> None:
    keys = dotted.split(".")
    node = cfg
    for k in keys[:-1]:
        node = node.setdefault(k, {})
    node[keys[-1]] = value


def expand_grid(cfg: dict) -> list[tuple[dict, dict]]:
    """Cartesian product of ``cfg["grid"]`` (dotted keys) as ``(assignment, config)`` pairs."""
    grid = cfg.get("grid") or {}
    keys = sorted(grid)
    out = []
    for combo in itertools.product(*(grid[k] for k in keys)):
        c = copy.deepcopy(cfg)
        c.pop("grid", None)
        assignment = dict(zip(keys, combo))
        for k, v in assignment.items():
            _set_path(c, k, v)
        out.append((assignment, c))
    return out


def worker_count(jobs: int) -> int:
    cap = os.environ.get("RECONBOUND_THREADS")
    limit = int(cap) if cap and cap.isdigit() and int(cap) > 0 else (os.cpu_count() or 1)
    return max(1, min(limit, jobs))


def _grid_job(args) -> dict:
    k, assignment, cfg, out_dir = args
    res = run_pipeline(cfg, out_dir=Path(out_dir) / f"run-{k:04d}", raise_errors=False)
    row = {"run": k, **assignment}
    if res.report is None:
        row.update(status=f"failed:{res.failed_stage}")
        return row
    doc = res.report.to_dict()
    row.update(status="ok", train_accuracy=doc["model"]["train_accuracy"],
               test_accuracy=doc["model"]["test_accuracy"], epsilon2=doc["rdp"]["epsilon2"],
               rdp_mse_bound=doc["bounds"]["rdp_mse_bound"],
               fil_mse_bound_min=doc["bounds"]["fil_mse_bound_min"],
               fil_mse_bound_median=doc["bounds"]["fil_mse_bound_median"])
    return row


GRID_COLUMNS = ("run", "status", "train_accuracy", "test_accuracy", "epsilon2", "rdp_mse_bound",
                "fil_mse_bound_min", "fil_mse_bound_median")


def run_grid(cfg: dict, out_dir: Union[str, Path, None] = None) -> list[dict]:
    """Run every grid point in its own directory and write ``grid.csv`` (one row per config)."""
    normalize_config(cfg)
    out = Path(out_dir if out_dir is not None else cfg.get("output", {}).get("dir", DEFAULTS["output"]["dir"]))
    out.mkdir(parents=True, exist_ok=True)
    jobs = [(k, a, c, str(out)) for k, (a, c) in enumerate(expand_grid(cfg))]
    workers = worker_count(len(jobs))
    if workers == 1:
        rows = [_grid_job(j) for j in jobs]
    else:
        # fresh interpreters: forking a process that already initialised JAX can deadlock
        with ProcessPoolExecutor(max_workers=workers, mp_context=get_context("spawn")) as pool:
            rows = list(pool.map(_grid_job, jobs))
    keys = sorted({k for r in rows for k in r} - set(GRID_COLUMNS))
    with (out / "grid.csv").open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(GRID_COLUMNS[:2]) + keys + list(GRID_COLUMNS[2:]),
                                lineterminator="\n", restval="")
        writer.writeheader()
        writer.writerows(rows)
    return rows
