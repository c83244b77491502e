"""Command-line entry point.

Subcommands: metrics, repair, ferm-train, ferm-predict, sem, mtl, datasets.
All randomness flows from --seed (default 0) and reports are emitted as
JSON with sorted keys, so identical invocations produce byte-identical
outputs.  Exit codes: 0 success, 1 usage error, 2 data/validation error,
3 solver failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys

import numpy as np

from . import causal, dataset as ds, ferm, metrics, multitask, transport

SCHEMA_VERSION = "1"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}\n{self.format_usage()}")


def _write_text(path, text: str):
    if path is None or path == "-":
        sys.stdout.write(text)
    else:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(text)


def _report_doc(command: str, seed: int, results: dict) -> str:
    doc = {"schema_version": SCHEMA_VERSION, "command": command, "seed": seed, "results": results}
    return json.dumps(doc, sort_keys=True, indent=2) + "\n"


def _parse_schema(text: str) -> dict:
    if text.startswith("@"):
        with open(text[1:], encoding="utf-8") as fh:
            text = fh.read()
    schema = json.loads(text)
    if not isinstance(schema, dict):
        raise ds.DatasetError("schema must be a JSON object mapping column -> role")
    return schema


def _read_scores_csv(path):
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            raise ds.DatasetError("empty scores file")
        fields = [f.strip() for f in reader.fieldnames]
        for required in ("group", "score"):
            if required not in fields:
                raise ds.DatasetError(f"scores file needs a {required!r} column")
        rows = list(reader)
    if not rows:
        raise ds.DatasetError("no score rows")
    ids = [r.get("id", str(i)) for i, r in enumerate(rows)]
    groups = [r["group"].strip() for r in rows]
    try:
        scores = np.array([float(r["score"]) for r in rows])
    except ValueError as exc:
        raise ds.DatasetError(f"unparseable score: {exc}") from None
    outcome = None
    if "y" in fields:
        try:
            outcome = np.array([float(r["y"]) for r in rows])
        except ValueError as exc:
            raise ds.DatasetError(f"unparseable outcome: {exc}") from None
    return ids, np.array(groups), scores, outcome


def _group_codes(groups: np.ndarray) -> np.ndarray:
    codes = {g: i for i, g in enumerate(dict.fromkeys(groups.tolist()))}
    return np.array([codes[g] for g in groups], dtype=float)


def cmd_metrics(args) -> int:
    ids, groups, scores, outcome = _read_scores_csv(args.input)
    scoreset = metrics.ScoreSet(
        scores=scores,
        group=_group_codes(groups),
        outcome=outcome,
        threshold=args.threshold,
    )
    grid = None
    outcome_kind = "regression"
    if args.grid_k and outcome is not None:
        kind = "classification" if set(np.unique(outcome)) <= {-1.0, 0.0, 1.0} else "regression"
        outcome_kind = kind
        y = outcome if kind == "regression" else np.where(outcome > 0, 1.0, -1.0)
        table = ds.dataset_from_columns(
            {"group": _group_codes(groups), "score": scores, "y": y},
            {"group": "sensitive", "score": "feature", "y": "outcome"},
            outcome_kind=kind,
        )
        grid = ds.make_grid(table, args.grid_k, args.grid_q)
    report = metrics.full_report(scoreset, grid=grid, bins=args.bins, outcome_kind=outcome_kind)
    _write_text(args.output, _report_doc("metrics", args.seed, report.to_json_dict()))
    return 0


def cmd_repair(args) -> int:
    ids, groups, scores, _ = _read_scores_csv(args.input)
    repaired, plan = transport.geodesic_repair(
        scores, groups, t=args.t, bins=args.bins, order=args.order, weights=args.weights
    )
    if args.scores_output:
        with open(args.scores_output, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["id", "group", "score", "repaired_score"])
            for i, g, s, r in zip(ids, groups, scores, repaired):
                writer.writerow([i, g, repr(float(s)), repr(float(r))])
    bary = plan.barycenter_distribution()
    summary = {"trade_off": plan.trade_off, "bins": plan.bins, "order": plan.order, "groups": {}}
    for code in plan.group_codes:
        mask = groups == code
        before = transport.EmpiricalDistribution.from_samples(scores[mask], bins=plan.bins)
        after = transport.EmpiricalDistribution.from_samples(repaired[mask], bins=plan.bins)
        summary["groups"][str(code)] = {
            "count": int(mask.sum()),
            "w_to_barycenter_before": transport.wasserstein(before, bary, order=plan.order),
            "w_to_barycenter_after": transport.wasserstein(after, bary, order=plan.order),
        }
    if args.sweep:
        t_values = [float(t) for t in args.sweep.split(",")]
        rows = []
        codes = plan.group_codes
        for t in t_values:
            swept, _ = transport.geodesic_repair(
                scores, groups, t=t, bins=args.bins, order=args.order, weights=args.weights
            )
            dists = {
                c: transport.EmpiricalDistribution.from_samples(swept[groups == c], bins=plan.bins)
                for c in codes
            }
            for i, a in enumerate(codes):
                for b in codes[i + 1:]:
                    rows.append((t, f"w1:{a}-{b}", transport.wasserstein(dists[a], dists[b], order=1)))
        with open(args.sweep_output, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["x", "series", "value"])
            for x, series, value in rows:
                writer.writerow([repr(float(x)), series, repr(float(value))])
    _write_text(args.output, _report_doc("repair", args.seed, summary))
    return 0


def _load_dataset(args) -> ds.TabularDataset:
    schema = _parse_schema(args.schema)
    return ds.load_csv(args.input, schema, outcome_kind=args.outcome_kind)


def _model_to_json(model: ferm.KernelModel) -> dict:
    return {
        "schema_version": SCHEMA_VERSION,
        "kernel": {"kind": model.kernel.kind, "gamma": model.kernel.gamma},
        "include_sensitive": model.include_sensitive,
        "coef": None if model.coef is None else [float(v) for v in model.coef],
        "dual_coef": None if model.dual_coef is None else [float(v) for v in model.dual_coef],
        "training_inputs": None
        if model.training_inputs is None
        else [[float(v) for v in row] for row in model.training_inputs],
        "constraint_report": model.constraint_report,
        "objective_value": model.objective_value,
    }


def _model_from_json(doc: dict) -> ferm.KernelModel:
    spec = ferm.KernelSpec(kind=doc["kernel"]["kind"], gamma=doc["kernel"]["gamma"])
    return ferm.KernelModel(
        kernel=spec,
        include_sensitive=doc["include_sensitive"],
        coef=None if doc["coef"] is None else np.array(doc["coef"]),
        dual_coef=None if doc["dual_coef"] is None else np.array(doc["dual_coef"]),
        training_inputs=None
        if doc["training_inputs"] is None
        else np.array(doc["training_inputs"]),
        constraint_report=doc["constraint_report"],
        objective_value=doc["objective_value"],
    )


def cmd_ferm_train(args) -> int:
    data = _load_dataset(args)
    kernel = ferm.KernelSpec(kind=args.kernel, gamma=args.gamma)
    epsilon = None if args.epsilon is None or args.epsilon < 0 else args.epsilon
    problem = ferm.FairERMProblem(
        loss=args.loss,
        lam=args.lam,
        epsilon=epsilon,
        kernel=kernel,
        include_sensitive=args.use_sensitive,
    )
    grid = ds.make_grid(data, args.grid_k, args.grid_q)
    model = ferm.train_gferm(problem, data, grid)
    _write_text(args.model_output, json.dumps(_model_to_json(model), sort_keys=True, indent=2) + "\n")
    results = {"constraint_report": model.constraint_report, "objective_value": model.objective_value}
    if args.epsilon_sweep:
        rows = []
        for eps in (float(e) for e in args.epsilon_sweep.split(",")):
            swept = ferm.train_gferm(
                ferm.FairERMProblem(
                    loss=args.loss, lam=args.lam, epsilon=eps, kernel=kernel,
                    include_sensitive=args.use_sensitive,
                ),
                data, grid,
            )
            risk = swept.objective_value
            rows.append((eps, "objective", risk))
        with open(args.sweep_output, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["x", "series", "value"])
            for x, series, value in rows:
                writer.writerow([repr(float(x)), series, repr(float(value))])
    _write_text(args.output, _report_doc("ferm-train", args.seed, results))
    return 0


def cmd_ferm_predict(args) -> int:
    with open(args.model, encoding="utf-8") as fh:
        model = _model_from_json(json.load(fh))
    data = _load_dataset(args)
    scores = model.predict_dataset(data)
    with open(args.scores_output, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["id", "group", "score"])
        for i, (g, s) in enumerate(zip(data.sensitive, scores)):
            writer.writerow([i, repr(float(g)), repr(float(s))])
    return 0


def _sem_to_json(sem: causal.LinearSEM) -> dict:
    return {
        "schema_version": SCHEMA_VERSION,
        "sensitive": sem.sensitive,
        "pi": sem.pi,
        "sensitive_values": list(sem.sensitive_values),
        "outcome": sem.outcome,
        "unobserved": sorted(sem.unobserved),
        "equations": [
            {
                "name": eq.name,
                "intercept": eq.intercept,
                "parents": list(eq.parents),
                "coeffs": list(eq.coeffs),
                "noise_std": eq.noise_std,
            }
            for eq in sem.equations
        ],
        "edges": [
            {"from": u, "to": v, "label": sem.edge_labels.get((u, v), "fair")}
            for u, v in sem.edges
        ],
    }


def _sem_from_json(doc: dict) -> causal.LinearSEM:
    return causal.LinearSEM(
        sensitive=doc["sensitive"],
        pi=doc["pi"],
        equations=tuple(
            causal.Equation(
                name=e["name"],
                intercept=e["intercept"],
                parents=tuple(e["parents"]),
                coeffs=tuple(e["coeffs"]),
                noise_std=e["noise_std"],
            )
            for e in doc["equations"]
        ),
        outcome=doc["outcome"],
        edge_labels={(e["from"], e["to"]): e["label"] for e in doc["edges"]},
        sensitive_values=tuple(doc["sensitive_values"]),
        unobserved=frozenset(doc["unobserved"]),
    )


def _resolve_sem(args) -> causal.LinearSEM:
    if args.scenario:
        return causal.scenario(args.scenario)
    if args.sem:
        with open(args.sem, encoding="utf-8") as fh:
            return _sem_from_json(json.load(fh))
    raise UsageError("sem: provide --scenario or --sem")


def cmd_sem(args) -> int:
    if args.sem_command == "sample":
        sem = _resolve_sem(args)
        data = causal.sample(sem, args.n, seed=args.seed)
        ds.to_csv(data, args.scores_output or "sample.csv")
        return 0
    if args.sem_command == "fit":
        skeleton = _resolve_sem(args)
        schema = _parse_schema(args.schema)
        data = ds.load_csv(args.input, schema, outcome_kind="regression")
        cols = {c.name: data.column(c.name) for c in data.schema if c.role != "ignore"}
        fitted = causal.fit(cols, skeleton)
        _write_text(args.output, json.dumps(_sem_to_json(fitted), sort_keys=True, indent=2) + "\n")
        return 0
    sem = _resolve_sem(args)
    paths = causal.PathSelection.parse(args.paths) if args.paths else causal.all_unfair_paths(sem)
    if args.sem_command == "pse":
        results = {
            "paths": [">".join(p) for p in paths.resolved(sem)],
            "closed_form": causal.path_specific_effect(sem, paths, args.a, args.a_bar),
        }
        if args.mc_samples:
            results["monte_carlo"] = causal.path_specific_effect_mc(
                sem, paths, args.a, args.a_bar, n=args.mc_samples, seed=args.seed
            )
        _write_text(args.output, _report_doc("sem pse", args.seed, results))
        return 0
    if args.sem_command == "counterfactual":
        record = {k: float(v) for k, v in json.loads(args.record).items()}
        value = causal.counterfactual(
            sem, record, paths, args.a_bar, mc_samples=args.mc_samples or 1, seed=args.seed
        )
        results = {"record": record, "counterfactual_outcome": value}
        _write_text(args.output, _report_doc("sem counterfactual", args.seed, results))
        return 0
    if args.sem_command == "correct-scores":
        with open(args.model, encoding="utf-8") as fh:
            model = _model_from_json(json.load(fh))
        schema = _parse_schema(args.schema)
        data = ds.load_csv(args.input, schema, outcome_kind="regression")
        feature_vars = [
            v for v in sem.variables
            if v not in sem.unobserved and v not in (sem.outcome, sem.sensitive)
        ]

        def score_fn(cols):
            Z = np.column_stack([cols[v] for v in feature_vars])
            if model.include_sensitive:
                Z = np.hstack([np.asarray(cols[sem.sensitive])[:, None], Z])
            return model.decision_function(Z)

        cols = {c.name: data.column(c.name) for c in data.schema if c.role != "ignore"}
        original = score_fn({k: np.asarray(v, dtype=float) for k, v in cols.items()})
        corrected = causal.correct_scores(
            sem, score_fn, cols, paths, args.a_bar,
            mc_samples=args.mc_samples or 1, seed=args.seed,
        )
        with open(args.scores_output, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["id", "group", "score", "corrected_score"])
            for i, (g, s, c) in enumerate(zip(data.sensitive, original, corrected)):
                writer.writerow([i, repr(float(g)), repr(float(s)), repr(float(c))])
        return 0
    raise UsageError(f"unknown sem subcommand {args.sem_command!r}")


def cmd_mtl(args) -> int:
    if args.mtl_command == "train-rep":
        data = _load_dataset(args)
        tasks = multitask.tasks_from_dataset(data)
        model = multitask.train_representation(
            tasks, r=args.r, lam=args.lam, constraint=args.mode,
            penalty=args.penalty, epsilon=args.eps, seed=args.seed,
        )
        doc = {
            "schema_version": SCHEMA_VERSION,
            "A": [[float(v) for v in row] for row in model.A],
            "B": [[float(v) for v in row] for row in model.B],
            "r": model.r,
            "lam": model.lam,
            "constraint": model.constraint,
            "max_gap_alignment": model.max_gap_alignment(),
            "objective_history": list(model.objective_history),
        }
        _write_text(args.output, json.dumps(doc, sort_keys=True, indent=2) + "\n")
        return 0
    if args.mtl_command == "transfer":
        with open(args.model, encoding="utf-8") as fh:
            doc = json.load(fh)
        rep = multitask.RepresentationModel(
            A=np.array(doc["A"]), B=np.array(doc["B"]), r=doc["r"], lam=doc["lam"],
            constraint=doc["constraint"], penalty=None, gap_vectors=(),
            objective_history=tuple(doc["objective_history"]),
        )
        data = _load_dataset(args)
        result = multitask.transfer(rep, multitask.task_from_dataset(data), lam=args.lam)
        results = {
            "coefficients": [float(v) for v in result.coefficients],
            "weights": [float(v) for v in result.weights],
            "fairness_diagnostic": result.fairness_diagnostic,
        }
        _write_text(args.output, _report_doc("mtl transfer", args.seed, results))
        return 0
    if args.mtl_command == "train-common":
        data = _load_dataset(args)
        classes = tuple(c.strip() for c in args.classes.split(",") if c.strip())
        model = multitask.train_common_mean(
            data, theta=args.theta, lam=args.lam, rho=args.rho,
            constraint_classes=classes, use_predicted_sensitive=args.predict_sensitive,
            loss=args.loss, seed=args.seed,
        )
        results = {
            "shared": [float(v) for v in model.shared],
            "deviations": {str(k): [float(v) for v in w] for k, w in model.deviations.items()},
            "constraint_residuals": list(model.constraint_residuals),
            "predictor_accuracy": None
            if model.predictor is None
            else model.predictor.holdout_accuracy,
        }
        _write_text(args.output, _report_doc("mtl train-common", args.seed, results))
        return 0
    raise UsageError(f"unknown mtl subcommand {args.mtl_command!r}")


def cmd_datasets(args) -> int:
    if args.datasets_command == "list":
        lines = [f"{e.name}\t{e.n_samples}\t{e.n_features}\t{','.join(e.tasks)}" for e in ds.DATASET_REGISTRY.values()]
        _write_text(args.output, "\n".join(lines) + "\n")
        return 0
    entry = ds.describe_dataset(args.name)
    results = {
        "name": entry.name,
        "reference": entry.reference,
        "n_samples": entry.n_samples,
        "n_features": entry.n_features,
        "sensitive": list(entry.sensitive),
        "tasks": list(entry.tasks),
    }
    _write_text(args.output, _report_doc("datasets describe", args.seed, results))
    return 0


def _add_common(parser):
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--threads", type=int, default=1, help="parallelism bound (1 keeps runs deterministic)")
    parser.add_argument("--output", default="-", help="report path, - for stdout")
    parser.add_argument("--format", choices=["json"], default="json")


def build_parser() -> _Parser:
    parser = _Parser(prog="fairkit", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("metrics", help="fairness report for a scores file")
    p.add_argument("--input", required=True)
    p.add_argument("--threshold", type=float, default=None)
    p.add_argument("--bins", type=int, default=None)
    p.add_argument("--grid-k", type=int, default=0)
    p.add_argument("--grid-q", type=int, default=2)
    _add_common(p)
    p.set_defaults(func=cmd_metrics)

    p = sub.add_parser("repair", help="transport scores toward the group barycenter")
    p.add_argument("--input", required=True)
    p.add_argument("--t", type=float, required=True)
    p.add_argument("--bins", type=int, default=None)
    p.add_argument("--order", type=int, choices=[1, 2], default=2)
    p.add_argument("--weights", choices=["empirical", "uniform"], default="empirical")
    p.add_argument("--scores-output", default=None)
    p.add_argument("--sweep", default=None, help="comma-separated t values for a plot CSV")
    p.add_argument("--sweep-output", default="sweep.csv")
    _add_common(p)
    p.set_defaults(func=cmd_repair)

    p = sub.add_parser("ferm-train", help="train the cell-constrained model")
    p.add_argument("--input", required=True)
    p.add_argument("--schema", required=True)
    p.add_argument("--outcome-kind", choices=list(ds.OUTCOME_KINDS), default="classification")
    p.add_argument("--loss", choices=list(ferm.LOSSES), default="squared")
    p.add_argument("--lambda", dest="lam", type=float, default=1.0)
    p.add_argument("--epsilon", type=float, default=0.0, help="negative values drop the constraint")
    p.add_argument("--kernel", choices=["linear", "rbf"], default="linear")
    p.add_argument("--gamma", type=float, default=None)
    p.add_argument("--grid-k", type=int, default=2)
    p.add_argument("--grid-q", type=int, default=2)
    p.add_argument("--use-sensitive", action="store_true")
    p.add_argument("--model-output", default="model.json")
    p.add_argument("--epsilon-sweep", default=None)
    p.add_argument("--sweep-output", default="sweep.csv")
    _add_common(p)
    p.set_defaults(func=cmd_ferm_train)

    p = sub.add_parser("ferm-predict", help="score a dataset with a trained model")
    p.add_argument("--model", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--schema", required=True)
    p.add_argument("--outcome-kind", choices=list(ds.OUTCOME_KINDS), default="classification")
    p.add_argument("--scores-output", default="scores.csv")
    _add_common(p)
    p.set_defaults(func=cmd_ferm_predict)

    p = sub.add_parser("sem", help="structural equation model tooling")
    p.add_argument("sem_command", choices=["sample", "fit", "pse", "counterfactual", "correct-scores"])
    p.add_argument("--scenario", default=None)
    p.add_argument("--sem", default=None, help="SEM JSON file")
    p.add_argument("--paths", default=None, help='e.g. "A>Y,A>D>Y"; defaults to all unfair paths')
    p.add_argument("--a", type=float, default=0.0)
    p.add_argument("--a-bar", type=float, default=1.0)
    p.add_argument("--n", type=int, default=1000)
    p.add_argument("--mc-samples", type=int, default=0)
    p.add_argument("--record", default=None, help="JSON object of variable values")
    p.add_argument("--model", default=None, help="trained model JSON for correct-scores")
    p.add_argument("--input", default=None)
    p.add_argument("--schema", default=None)
    p.add_argument("--scores-output", default="scores.csv")
    _add_common(p)
    p.set_defaults(func=cmd_sem)

    p = sub.add_parser("mtl", help="fair multitask training")
    p.add_argument("mtl_command", choices=["train-rep", "transfer", "train-common"])
    p.add_argument("--input", required=True)
    p.add_argument("--schema", required=True)
    p.add_argument("--outcome-kind", choices=list(ds.OUTCOME_KINDS), default="regression")
    p.add_argument("--r", type=int, default=1)
    p.add_argument("--lambda", dest="lam", type=float, default=0.1)
    p.add_argument("--mode", choices=["equality", "relaxed", "none"], default="equality")
    p.add_argument("--penalty", type=float, default=None)
    p.add_argument("--eps", type=float, default=None)
    p.add_argument("--model", default=None)
    p.add_argument("--theta", type=float, default=0.5)
    p.add_argument("--rho", type=float, default=1.0)
    p.add_argument("--classes", default="+,-")
    p.add_argument("--predict-sensitive", action="store_true")
    p.add_argument("--loss", choices=["squared", "linear"], default="squared")
    _add_common(p)
    p.set_defaults(func=cmd_mtl)

    p = sub.add_parser("datasets", help="bundled dataset registry")
    p.add_argument("datasets_command", choices=["list", "describe"])
    p.add_argument("name", nargs="?", default=None)
    _add_common(p)
    p.set_defaults(func=cmd_datasets)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command == "datasets" and args.datasets_command == "describe" and not args.name:
            raise UsageError("datasets describe: a dataset name is required")
        return args.func(args)
    except UsageError as exc:
        sys.stderr.write(str(exc).rstrip() + "\n")
        return 1
    except ferm.SolverError as exc:
        sys.stderr.write(f"solver failure: {exc}\n")
        return 3
    except (
        ds.DatasetError,
        metrics.MetricError,
        transport.TransportError,
        causal.CausalError,
        ferm.FermError,
        multitask.MtlError,
        FileNotFoundError,
        json.JSONDecodeError,
    ) as exc:
        sys.stderr.write(f"error: {exc}\n")
        return 2


if __name__ == "__main__":
    sys.exit(main())
