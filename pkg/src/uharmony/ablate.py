"""Ablation matrix runner: named config variants x seeds on shared data.

A plan file declares a base config, variants as config overrides, seeds, the
synthetic domains to generate, and optional expected orderings between
variants; violations are flagged in the report (exit code stays 0, the
numbers speak for themselves).
"""

from __future__ import annotations

import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .backbone import BackboneConfig
from .config import TrainConfig
from .errors import ConfigurationError
from .evaluate import evaluate
from .synthdata import DatasetManifest, DomainSpec, generate_domain
from .train import train


@dataclass
class AblationPlan:
    base_train: dict
    base_backbone: dict
    variants: list[dict]            # {"name", "train": {...}, "backbone": {...}}
    seeds: list[int]
    data_specs: list[dict]          # DomainSpec dicts
    n_samples: int
    expect: list[dict] = field(default_factory=list)
    # expect entries: {"lower": name, "upper": name, "domain": name?, "margin": float}

    def __post_init__(self):
        names = [v["name"] for v in self.variants]
        if len(set(names)) != len(names):
            raise ConfigurationError(f"variant names must be unique: {names}")
        for v in self.variants:
            self.resolve(v["name"])  # fail fast on unresolvable configs
        for e in self.expect:
            for side in ("lower", "upper"):
                if e[side] not in names:
                    raise ConfigurationError(f"expectation references unknown variant {e[side]!r}")

    def variant(self, name: str) -> dict:
        for v in self.variants:
            if v["name"] == name:
                return v
        raise ConfigurationError(f"unknown variant {name!r}")

    def resolve(self, name: str, seed: int = 0) -> tuple[TrainConfig, BackboneConfig]:
        v = self.variant(name)
        tdoc = {**self.base_train, **v.get("train", {}), "seed": seed}
        bdoc = {**self.base_backbone, **v.get("backbone", {})}
        return TrainConfig(**tdoc), BackboneConfig(**bdoc)


def load_plan(path) -> AblationPlan:
    try:
        doc = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise ConfigurationError(f"cannot read plan {path}: {e}") from e
    try:
        base = doc.get("base", {})
        return AblationPlan(
            base_train=base.get("train", {}),
            base_backbone=base.get("backbone", {}),
            variants=doc["variants"],
            seeds=[int(s) for s in doc["seeds"]],
            data_specs=doc["data"]["specs"],
            n_samples=int(doc["data"]["n_samples"]),
            expect=doc.get("expect", []),
        )
    except KeyError as e:
        raise ConfigurationError(f"plan is missing required key {e}") from e


def generate_plan_data(plan: AblationPlan, out_dir: Path, seed: int) -> list[DatasetManifest]:
    """Shared per-seed datasets: spec seeds are offset by the run seed, so all
    variants at one seed reuse byte-identical data."""
    data_dir = out_dir / "data" / f"seed{seed}"
    manifests = []
    for doc in plan.data_specs:
        spec_doc = dict(doc)
        spec_doc["seed"] = int(spec_doc.get("seed", 0)) + seed
        spec = DomainSpec.from_dict(spec_doc)
        mpath = data_dir / f"{spec.name}_manifest.json"
        if mpath.exists():
            manifests.append(DatasetManifest.load_file(mpath))
        else:
            manifests.append(generate_domain(spec, plan.n_samples, data_dir))
    return manifests


def run_one(plan: AblationPlan, out_dir, variant: str, seed: int) -> dict:
    out_dir = Path(out_dir)
    cfg, bcfg = plan.resolve(variant, seed)
    manifests = generate_plan_data(plan, out_dir, seed)
    run_dir = out_dir / "runs" / f"{variant}_s{seed}"
    result = train(cfg, bcfg, manifests, run_dir)
    mode = "oracle" if bcfg.head_mode == "oracle_multi_head" else "dataset_free"
    rep = evaluate(result.state.net, result.registry, manifests, mode=mode,
                   split="test", gate=result.state.gate, bank=result.state.bank,
                   tau=cfg.tau, route_mode=cfg.route_mode)
    return {
        "variant": variant,
        "seed": seed,
        "mode": mode,
        "class_dsc": {f"{dom}/{cls}": v for (dom, cls), v in rep.class_dsc.items()},
        "domain_avg": rep.domain_avg,
        "domain_acc": rep.domain_acc,
        "metrics_csv": str(result.metrics_path),
    }


def _run_one_star(args):  # ProcessPoolExecutor needs a module-level callable
    return run_one(*args)


@dataclass
class AblationSummary:
    runs: list[dict]
    variant_means: dict[str, dict[str, float]]  # variant -> domain -> mean dsc
    violations: list[str]

    def table(self) -> str:
        lines = [f"{'variant':<22s} {'seed':>4s}  per-domain avg DSC"]
        for r in self.runs:
            avgs = "  ".join(f"{d}={v:.4f}" for d, v in r["domain_avg"].items())
            lines.append(f"{r['variant']:<22s} {r['seed']:>4d}  {avgs}")
        lines.append("")
        lines.append(f"{'variant':<22s}  seed-mean per domain")
        for name, means in self.variant_means.items():
            avgs = "  ".join(f"{d}={v:.4f}" for d, v in means.items())
            lines.append(f"{name:<22s}  {avgs}")
        return "\n".join(lines)


def check_expectations(plan: AblationPlan, variant_means: dict) -> list[str]:
    violations = []
    for e in plan.expect:
        lower, upper = e["lower"], e["upper"]
        margin = float(e.get("margin", 0.0))
        domain = e.get("domain")

        def score(name):
            means = variant_means[name]
            return means[domain] if domain else float(np.mean(list(means.values())))

        lo, hi = score(lower), score(upper)
        if lo > hi + margin:
            where = f" on {domain}" if domain else ""
            violations.append(
                f"expected {lower} <= {upper} (+{margin:.3f}){where}, "
                f"got {lo:.4f} > {hi:.4f}"
            )
    return violations


def run_plan(plan: AblationPlan, out_dir, workers: int = 1,
             emit_plot_data: bool = False) -> AblationSummary:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for seed in plan.seeds:  # generate shared data up front (single writer)
        generate_plan_data(plan, out_dir, seed)
    jobs = [(plan, out_dir, v["name"], s) for v in plan.variants for s in plan.seeds]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            runs = list(pool.map(_run_one_star, jobs))
    else:
        runs = [run_one(*j) for j in jobs]

    variant_means: dict[str, dict[str, float]] = {}
    for v in plan.variants:
        name = v["name"]
        mine = [r for r in runs if r["variant"] == name]
        domains = mine[0]["domain_avg"].keys()
        variant_means[name] = {
            d: float(np.mean([r["domain_avg"][d] for r in mine])) for d in domains
        }
    violations = check_expectations(plan, variant_means)

    lines = ["variant,seed,domain,class,dsc"]
    for r in runs:
        for key, v in r["class_dsc"].items():
            dom, cls = key.split("/", 1)
            lines.append(f"{r['variant']},{r['seed']},{dom},{cls},{v:.6f}")
        for dom, v in r["domain_avg"].items():
            lines.append(f"{r['variant']},{r['seed']},{dom},average,{v:.6f}")
    (out_dir / "runs.csv").write_text("\n".join(lines) + "\n")

    sl = ["variant,domain,mean_dsc"]
    for name, means in variant_means.items():
        for d, v in means.items():
            sl.append(f"{name},{d},{v:.6f}")
    (out_dir / "summary.csv").write_text("\n".join(sl) + "\n")
    if violations:
        (out_dir / "violations.txt").write_text("\n".join(violations) + "\n")

    if emit_plot_data:
        pl = ["variant,seed,epoch,domain,class,dsc,loss"]
        for r in runs:
            text = Path(r["metrics_csv"]).read_text().splitlines()[1:]
            for row in text:
                epoch, dom, cls, dsc, loss, _acc = row.split(",")
                pl.append(f"{r['variant']},{r['seed']},{epoch},{dom},{cls},{dsc},{loss}")
        (out_dir / "plot_data.csv").write_text("\n".join(pl) + "\n")

    summary = AblationSummary(runs=runs, variant_means=variant_means, violations=violations)
    (out_dir / "report.txt").write_text(
        summary.table() + ("\n\n" + "\n".join(f"TREND VIOLATION: {v}" for v in violations)
                           if violations else "") + "\n"
    )
    return summary
