"""Command-line entry point.

    cbdt <command> [--config run.yaml] [--set section.key=value ...] [flags]

Commands: train, benchmark, ablate, sensitivity, rules, generate-data.

Configuration precedence, lowest first: built-in defaults, the YAML file given
by --config, --set overrides (in order), then the dedicated flags (--seeds,
--workers, --source, --out). The fully resolved configuration is written to
every output directory as config.yaml, next to manifest.json which lists the
emitted files and carries the run format tag.

Output directory: --out, else ``output_dir`` from the config, else
$CBDT_OUTPUT_ROOT/<command> (CBDT_OUTPUT_ROOT defaults to ./runs).

Exit codes: 0 success, 2 invalid input or configuration, 3 runtime failure
(I/O and other unexpected errors), 4 numerical failure (diverged training,
undefined metric).
"""
from __future__ import annotations

import argparse
import copy
import csv
import hashlib
import json
import logging
import os
import sys
from dataclasses import asdict, fields

import numpy as np
import yaml

from . import experiments as ex
from .booster import BoostedModel, BoosterConfig, fit, predict_cate
from .dataset import SyntheticSpec, write_csv
from .errors import NumericalDomainError, ValidationError
from .evaluation import assemble_report, pairs_csv, per_seed_csv, plot_report, report_csv, report_text
from .rules import RuleExtractionSpec, extract_rules, rule_coverage, rule_fidelity, rule_truth_check
from .schedule import write_history_csv

log = logging.getLogger("cbdt")

RUN_FORMAT = "cbdt-run/1"
OUTPUT_ROOT_ENV = "CBDT_OUTPUT_ROOT"
EXIT_OK, EXIT_VALIDATION, EXIT_RUNTIME, EXIT_NUMERICAL = 0, 2, 3, 4
COMMANDS = ("train", "benchmark", "ablate", "sensitivity", "rules", "generate-data")

# Keys whose value is free-form (any YAML value, no nested key checking).
_OPEN = {"booster.eta_prime", "data.ihdp_dir", "output_dir", "rules.model", "data.synthetic"}


def default_config() -> dict:
    rules = {f.name: f.default for f in fields(RuleExtractionSpec)}
    rules["model"] = None
    return {
        "output_dir": None,
        "seeds": list(range(10)),
        "workers": 1,
        "data": {"source": "synthetic", "ihdp_dir": None, "test_fraction": 0.2, "synthetic": {}},
        "booster": BoosterConfig().to_dict(),
        "learners": {"rounds": 200, "learning_rate": 0.1, "tree": asdict(BoosterConfig().tree)},
        "benchmark": {"methods": list(ex.METHODS), "coverage_draws": 200, "timing_repetitions": 5,
                      "trim": 1, "alpha": 0.05, "plots": True},
        "ablate": {"trim": 0},
        "sensitivity": {**{k: list(v) for k, v in ex.SENSITIVITY_GRID.items()}, "trim": 1, "plots": True},
        "rules": rules,
    }


def _merge(base: dict, override: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, val in (override or {}).items():
        where = f"{path}{key}"
        if key not in out:
            raise ValidationError(f"unknown config field {where!r}")
        if isinstance(out[key], dict) and where not in _OPEN:
            if not isinstance(val, dict):
                raise ValidationError(f"config field {where!r} must be a mapping")
            out[key] = _merge(out[key], val, where + ".")
        else:
            out[key] = val
    return out


def _set_path(cfg: dict, dotted: str, raw: str) -> dict:
    value = yaml.safe_load(raw)
    override: dict = {}
    node = override
    parts = dotted.split(".")
    for p in parts[:-1]:
        node = node.setdefault(p, {})
    node[parts[-1]] = value
    return _merge(cfg, override)


def _parse_seeds(text: str) -> list[int]:
    out: list[int] = []
    for part in text.split(","):
        part = part.strip()
        if "-" in part[1:]:
            lo, hi = part.split("-", 1)
            out.extend(range(int(lo), int(hi) + 1))
        elif part:
            out.append(int(part))
    if not out:
        raise ValidationError("--seeds selected no seeds")
    return out


def resolve_config(args: argparse.Namespace) -> dict:
    cfg = default_config()
    if args.config:
        with open(args.config, encoding="utf-8") as fh:
            loaded = yaml.safe_load(fh) or {}
        if not isinstance(loaded, dict):
            raise ValidationError(f"{args.config}: top level must be a mapping")
        cfg = _merge(cfg, loaded)
    for item in args.set or []:
        if "=" not in item:
            raise ValidationError(f"--set expects key=value, got {item!r}")
        key, raw = item.split("=", 1)
        cfg = _set_path(cfg, key.strip(), raw)
    if args.seeds:
        cfg["seeds"] = _parse_seeds(args.seeds)
    if args.workers is not None:
        cfg["workers"] = args.workers
    if args.source:
        cfg["data"]["source"] = args.source
    if args.out:
        cfg["output_dir"] = args.out
    if not cfg["seeds"]:
        raise ValidationError("seeds must not be empty")
    return cfg


def _booster(cfg: dict) -> BoosterConfig:
    try:
        return BoosterConfig.from_dict(cfg["booster"])
    except TypeError as err:
        raise ValidationError(f"booster: {err}") from None
    except ValidationError as err:
        raise ValidationError(f"booster.{err}") from None


def _data(cfg: dict) -> ex.DataConfig:
    try:
        return ex.DataConfig(**cfg["data"])
    except TypeError as err:
        raise ValidationError(f"data: {err}") from None


def _rules_spec(cfg: dict) -> RuleExtractionSpec:
    r = {k: v for k, v in cfg["rules"].items() if k != "model"}
    try:
        return RuleExtractionSpec(**r)
    except ValidationError as err:
        raise ValidationError(f"rules.{err}") from None


def output_dir(cfg: dict, command: str) -> str:
    out = cfg.get("output_dir") or os.path.join(os.environ.get(OUTPUT_ROOT_ENV, "runs"), command)
    os.makedirs(out, exist_ok=True)
    return out


class _Run:
    """Collects emitted files and writes config.yaml and manifest.json."""

    def __init__(self, out: str, command: str, cfg: dict):
        self.out, self.command, self.cfg, self.files = out, command, cfg, []

    def path(self, name: str) -> str:
        self.files.append(name)
        return os.path.join(self.out, name)

    def write(self, name: str, text: str) -> None:
        with open(self.path(name), "w", encoding="utf-8", newline="") as fh:
            fh.write(text)

    def finish(self, extra: dict | None = None) -> None:
        resolved = {"format": RUN_FORMAT, "command": self.command, **self.cfg}
        self.write("config.yaml", yaml.safe_dump(resolved, sort_keys=True))
        entries = []
        for name in sorted(set(self.files)):
            with open(os.path.join(self.out, name), "rb") as fh:
                blob = fh.read()
            entries.append({"name": name, "bytes": len(blob), "sha256": hashlib.sha256(blob).hexdigest()})
        manifest = {"format": RUN_FORMAT, "command": self.command, "files": entries, **(extra or {})}
        with open(os.path.join(self.out, "manifest.json"), "w", encoding="utf-8") as fh:
            json.dump(manifest, fh, sort_keys=True, indent=1)
        log.info("wrote %d files to %s", len(entries) + 1, self.out)


def _trace_csv(model: BoostedModel) -> str:
    lines = ["k,loss,grad_variance,lambda,alpha,residual_rms"]
    lines += [f"{r.k},{r.loss!r},{r.grad_variance!r},{r.lam!r},{r.alpha!r},{r.residual_rms!r}" for r in model.trace]
    return "\n".join(lines) + "\n"


# --- commands ----------------------------------------------------------------

def cmd_train(cfg: dict, run: _Run) -> None:
    booster, data = _booster(cfg), _data(cfg)
    seed = cfg["seeds"][0]
    ds = ex.load_dataset(data, seed)
    model = fit(booster.replace(seed=seed), ds)
    model.save(run.path("model.json"))
    run.write("trace.csv", _trace_csv(model))
    write_history_csv(model.schedule, run.path("schedule.csv"))
    summary = {"rows": ds.n, "rounds": model.rounds, "tau_ref": model.tau_ref,
               "tau_ref_source": model.tau_ref_source, "data": str(ds.meta.get("kind", data.source))}
    if ds.has_truth:
        summary["in_sample_pehe_sqrt"] = float(np.sqrt(np.mean((predict_cate(model, ds.features) - ds.tau) ** 2)))
    run.write("summary.json", json.dumps(summary, sort_keys=True, indent=1))
    print(json.dumps(summary, sort_keys=True))


def cmd_benchmark(cfg: dict, run: _Run) -> None:
    b = cfg["benchmark"]
    booster, data = _booster(cfg), _data(cfg)
    results = ex.run_benchmark(b["methods"], cfg["seeds"], data, booster, ex.learner_spec_from(cfg["learners"]),
                               b["coverage_draws"], b["timing_repetitions"], cfg["workers"])
    report = assemble_report(results, {"booster": cfg["booster"], "learners": cfg["learners"]},
                             trim=b["trim"], alpha=b["alpha"])
    report.notes.insert(0, f"data: {ex.data_provenance(data, cfg['seeds'][0])}; "
                           f"cbdt tau_ref source: {booster.tau_ref_source}")
    text = report_text(report)
    run.write("report.txt", text)
    run.write("summary.csv", report_csv(report))
    run.write("per_seed.csv", per_seed_csv(report))
    run.write("pairs.csv", pairs_csv(report))
    if b["plots"]:
        for p in plot_report(report, os.path.join(run.out, "benchmark")):
            run.files.append(os.path.basename(p))
    print(text, end="")


def cmd_ablate(cfg: dict, run: _Run) -> None:
    booster, data = _booster(cfg), _data(cfg)
    scores = ex.run_ablation(cfg["seeds"], data, booster, cfg["workers"])
    rows = ex.summarize_ablation(scores, cfg["ablate"]["trim"])
    lines = [f"{'variant':<22}{'sqrt_PEHE':>11}{'ATE_err':>10}{'dPEHE%':>9}{'dATE%':>9}"]
    lines += [f"{r.variant:<22}{r.pehe_sqrt:>11.4f}{r.ate_error:>10.4f}{r.pehe_change_pct:>+9.1f}{r.ate_change_pct:>+9.1f}"
              for r in rows]
    text = "\n".join(lines) + "\n"
    run.write("ablation.txt", text)
    run.write("ablation.csv", _csv(["variant", "pehe_sqrt", "ate_error", "pehe_change_pct", "ate_change_pct"],
                                   [asdict(r).values() for r in rows]))
    run.write("ablation_per_seed.csv", _csv(["variant", "seed", "pehe_sqrt", "ate_error"],
                                            [asdict(s).values() for s in scores]))
    print(text, end="")


def _csv(header, rows) -> str:
    import io
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([repr(v) if isinstance(v, float) else v for v in r])
    return buf.getvalue()


def cmd_sensitivity(cfg: dict, run: _Run) -> None:
    s = cfg["sensitivity"]
    booster, data = _booster(cfg), _data(cfg)
    grid = {k: tuple(float(v) for v in s[k]) for k in ("lam", "alpha", "eta")}
    cells = ex.run_sensitivity(cfg["seeds"], data, booster, grid, cfg["workers"], s["trim"])
    run.write("grid.csv", _csv(["cell", "lambda", "alpha", "eta", "pehe_sqrt", "ate_error", "rmse"],
                               [(c.index, c.lam, c.alpha, c.eta, c.pehe_sqrt, c.ate_error, c.rmse) for c in cells]))
    ranked = sorted(cells, key=lambda c: (c.pehe_sqrt, c.index))
    lines = [f"{'rank':>4}{'lambda':>8}{'alpha':>7}{'eta':>7}{'sqrt_PEHE':>11}{'ATE_err':>9}{'RMSE':>8}"]
    lines += [f"{i + 1:>4}{c.lam:>8g}{c.alpha:>7g}{c.eta:>7g}{c.pehe_sqrt:>11.4f}{c.ate_error:>9.4f}{c.rmse:>8.4f}"
              for i, c in enumerate(ranked)]
    try:
        shape = ex.sensitivity_shape(cells)
        lines += ["", f"mean sqrt_PEHE at lambda=10: {shape.lam10_mean:.4f}; at lambda=1: {shape.lam1_mean:.4f}",
                  f"safe-zone spread: {100 * shape.safe_spread:.1f}% of its minimum"]
    except ValidationError as err:
        lines += ["", f"shape summary skipped: {err}"]
    text = "\n".join(lines) + "\n"
    run.write("ranked.txt", text)
    if s["plots"]:
        run.files.append(_heatmaps(cells, grid, os.path.join(run.out, "sensitivity_heatmaps.svg")))
    print(text, end="")


def _heatmaps(cells, grid, path) -> str:
    from .evaluation import _pyplot
    plt = _pyplot()
    fig, axes = plt.subplots(1, len(grid["alpha"]), figsize=(4 * len(grid["alpha"]), 3.5), squeeze=False)
    for ax, a in zip(axes[0], grid["alpha"]):
        m = np.full((len(grid["lam"]), len(grid["eta"])), np.nan)
        for c in cells:
            if c.alpha == a:
                m[grid["lam"].index(c.lam), grid["eta"].index(c.eta)] = c.pehe_sqrt
        im = ax.imshow(m, origin="lower", aspect="auto", cmap="viridis")
        ax.set_xticks(range(len(grid["eta"])), [f"{v:g}" for v in grid["eta"]])
        ax.set_yticks(range(len(grid["lam"])), [f"{v:g}" for v in grid["lam"]])
        ax.set_xlabel("eta")
        ax.set_ylabel("lambda")
        ax.set_title(f"alpha = {a:g}")
        fig.colorbar(im, ax=ax, label="sqrt PEHE")
    fig.tight_layout()
    fig.savefig(path, metadata={"Date": None})
    plt.close(fig)
    return os.path.basename(path)


def cmd_rules(cfg: dict, run: _Run) -> None:
    data, spec = _data(cfg), _rules_spec(cfg)
    seed = cfg["seeds"][0]
    ds = ex.load_dataset(data, seed)
    model_path = cfg["rules"]["model"]
    if model_path:
        if not os.path.exists(model_path):
            raise ValidationError(f"model file not found: {model_path}")
        model = BoostedModel.load(model_path)
        if model.n_features != ds.d:
            raise ValidationError(f"model expects {model.n_features} features, data has {ds.d}")
    else:
        model = fit(_booster(cfg).replace(seed=seed), ds)
        model.save(run.path("model.json"))
    rules = extract_rules(model, ds, spec)
    run.write("rules.txt", rules.text())
    run.write("rules.csv", rules.to_csv())
    run.write("rules.json", rules.to_json())
    summary = {"n_rules": len(rules), "coverage": rule_coverage(rules, ds.features), "notes": rules.notes}
    if rules.rules:
        summary["fidelity"] = rule_fidelity(rules, model, ds)
    if ds.has_truth and rules.rules:
        truth = rule_truth_check(rules, ds)
        run.write("truth.csv", _csv(["rule", "true_effect", "deviation", "ci_covers"],
                                    [(t.rule, t.true_effect, t.deviation, int(t.ci_covers)) for t in truth]))
        summary["max_truth_deviation"] = max(t.deviation for t in truth)
    run.write("summary.json", json.dumps(summary, sort_keys=True, indent=1))
    print(rules.text(), end="")
    print(json.dumps(summary, sort_keys=True))


def cmd_generate_data(cfg: dict, run: _Run) -> None:
    data = _data(cfg)
    if data.source not in ("synthetic", "ihdp", "ihdp-surrogate"):
        raise ValidationError("generate-data needs data.source synthetic, ihdp or ihdp-surrogate")
    for seed in cfg["seeds"]:
        ds = ex.load_dataset(data, seed)
        name = f"{data.source}_{seed}.csv"
        write_csv(ds, run.path(name))
        print(f"{name}: {ds.n} rows, {ds.d} features, {ds.n_treated} treated")


HANDLERS = {"train": cmd_train, "benchmark": cmd_benchmark, "ablate": cmd_ablate,
            "sensitivity": cmd_sensitivity, "rules": cmd_rules, "generate-data": cmd_generate_data}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cbdt", description="Causal boosted trees: training and experiments.")
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", help="YAML run configuration")
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override one config field, e.g. --set booster.loss.lam=0.5 (repeatable)")
    p.add_argument("--seeds", help="seed list, e.g. 0-9 or 1,4,7")
    p.add_argument("--workers", type=int, help="worker processes for multi-cell commands")
    p.add_argument("--source", help="data source: synthetic, ihdp, ihdp-surrogate or a CSV path")
    p.add_argument("--out", help="output directory")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        cfg["workers"] = int(cfg["workers"])
        run = _Run(output_dir(cfg, args.command), args.command, cfg)
        HANDLERS[args.command](cfg, run)
        run.finish()
    except ValidationError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_VALIDATION
    except NumericalDomainError as err:
        print(f"numerical error: {err}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (OSError, yaml.YAMLError) as err:
        print(f"runtime error: {err}", file=sys.stderr)
        return EXIT_RUNTIME
    except Exception as err:  # noqa: BLE001 - surfaced as a runtime failure with its type
        print(f"runtime error: {type(err).__name__}: {err}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
