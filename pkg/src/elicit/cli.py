"""Command line entry point for batch runs, data generation, and serving.

Every subcommand that writes results also writes a manifest recording
the resolved arguments, seeds, package and dependency versions, kernel
backend, and SHA-256 hashes of all input files. Re-running a manifest
with ``elicit rerun`` reproduces the outputs bit-for-bit; to that end no
output file contains wall-clock content. Files land atomically (temp +
rename) and nothing is written until the whole command has succeeded.
"""

from __future__ import annotations

import argparse
import hashlib
import io
import json
import sys
from pathlib import Path

import numpy as np
import pandas as pd
import scipy

from . import __version__
from .data import (
    DataError,
    Dataset,
    atomic_write_text,
    load_dataset,
    read_drugs_tsv,
    read_features_tsv,
)
from .ep import ep_fit
from .evaluation import (
    EvaluationError,
    GroundTruth,
    OracleExpert,
    ReplayExpert,
    SyntheticConfig,
    auc_mse,
    empirical_pvalue,
    generate_synthetic,
    loo_cv,
    queries_log_csv,
    queries_to_half_improvement,
    run_elicitation_experiment,
    trace_csv,
)
from .kernels import BACKEND
from .knowledge import (
    build_description_vectors,
    descriptions_from_csv,
    descriptions_to_csv,
    parse_drug_targets,
    parse_gmt,
)
from .model import FeedbackSet, Hyperparameters, ModelError
from .strategies import StrategyError, pool_from_csv, pool_to_csv

STRATEGY_CHOICES = ("eig", "bandit", "random")


class CliError(Exception):
    """Validation failure reported on stderr with a nonzero exit."""


# ---------------------------------------------------------------------------
# Output staging and the manifest


class OutputSet:
    """Collects rendered files and commits them only on success."""

    def __init__(self, out_dir: str | Path):
        self.out_dir = Path(out_dir)
        self.files: dict[str, str] = {}

    def add(self, name: str, text: str) -> None:
        self.files[name] = text

    def commit(self) -> None:
        self.out_dir.mkdir(parents=True, exist_ok=True)
        for name, text in self.files.items():
            atomic_write_text(self.out_dir / name, text)


def _sha256(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return "sha256:" + h.hexdigest()


def _manifest(command: str, argv: list[str], seeds: list[int], inputs: list[str | Path]) -> str:
    payload = {
        "command": command,
        "argv": list(argv),
        "seeds": seeds,
        "versions": {
            "package": __version__,
            "python": sys.version.split()[0],
            "numpy": np.__version__,
            "scipy": scipy.__version__,
            "pandas": pd.__version__,
        },
        "backend": BACKEND,
        "inputs": {str(p): _sha256(p) for p in inputs},
    }
    return json.dumps(payload, indent=2, sort_keys=True) + "\n"


def _matrix_csv(values: np.ndarray, column_ids: list[str], sample_ids: list[str]) -> str:
    df = pd.DataFrame(np.asarray(values), index=sample_ids, columns=column_ids)
    buf = io.StringIO()
    df.to_csv(buf, sep="\t", float_format="%.17g")
    return buf.getvalue()


def _features_tsv(features) -> str:
    lines = ["id\tkind\tgene"]
    for f in features:
        lines.append(f"{f.id}\t{f.kind}\t{f.gene or ''}")
    return "\n".join(lines) + "\n"


def _drugs_tsv(drugs) -> str:
    lines = ["id\tname\tgroup\ttargets"]
    for d in drugs:
        lines.append(f"{d.id}\t{d.name}\t{d.group}\t{','.join(sorted(d.targets))}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# Shared loading helpers


def _load_inputs(args) -> tuple[Dataset, list[str | Path]]:
    paths: list[str | Path] = [args.data, args.response]
    if args.features:
        paths.append(args.features)
    if args.drugs:
        paths.append(args.drugs)
    dataset = load_dataset(args.data, args.response, args.features, args.drugs)
    return dataset, paths


def _load_feedback(path: str | Path) -> FeedbackSet:
    from .evaluation import feedback_from_csv

    return feedback_from_csv(Path(path).read_text())


def _parse_seeds(text: str) -> list[int]:
    try:
        seeds = [int(s) for s in text.split(",") if s.strip() != ""]
    except ValueError:
        raise CliError(f"seeds must be comma-separated integers, got {text!r}") from None
    if not seeds:
        raise CliError("at least one seed is required")
    return seeds


def _metrics_csv(dataset: Dataset, result) -> str:
    lines = ["drug_id,mse,c_index"]
    for j, drug in enumerate(dataset.drugs):
        lines.append(
            f"{drug.id},{result.mse_per_drug[j]:.17g},{result.c_index_per_drug[j]:.17g}"
        )
    lines.append(f"average,{result.mse_mean:.17g},{result.c_index_mean:.17g}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# Subcommands


def cmd_fit(args, argv: list[str]) -> None:
    dataset, inputs = _load_inputs(args)
    feedback = FeedbackSet()
    if args.feedback:
        feedback = _load_feedback(args.feedback)
        inputs.append(args.feedback)
    hp = Hyperparameters()

    if args.engine == "ep":
        state = ep_fit(dataset, feedback, hp)
        posterior = state.posterior_csv()
        result = loo_cv(dataset, feedback, hp, warm_start=state)
    else:
        from .evaluation import _loo_loop
        from .gibbs import gibbs_fit

        res = gibbs_fit(
            dataset, feedback, hp, n_samples=args.gibbs_samples,
            n_burnin=args.gibbs_burnin, seed=args.seed,
        )
        buf = ["drug_id,feature_id,weight_mean,weight_sd,inclusion"]
        sd = np.sqrt(res.weight_var)
        for j, drug in enumerate(dataset.drugs):
            for k, feat in enumerate(dataset.features):
                buf.append(
                    f"{drug.id},{feat.id},{res.weight_mean[j, k]:.17g},"
                    f"{sd[j, k]:.17g},{res.inclusion[j, k]:.17g}"
                )
        posterior = "\n".join(buf) + "\n"

        def predictor(fold: Dataset, x_star: np.ndarray) -> np.ndarray:
            fold_res = gibbs_fit(
                fold, feedback, hp, n_samples=args.gibbs_samples,
                n_burnin=args.gibbs_burnin, seed=args.seed,
            )
            return fold_res.weight_mean @ x_star

        result = _loo_loop(dataset, predictor)

    out = OutputSet(args.out)
    out.add("posterior.csv", posterior)
    out.add("metrics.csv", _metrics_csv(dataset, result))
    out.add("manifest.json", _manifest("fit", argv, [args.seed], inputs))
    out.commit()


def cmd_simulate(args, argv: list[str]) -> None:
    dataset, inputs = _load_inputs(args)
    strategies = [s.strip() for s in args.strategies.split(",") if s.strip()]
    for s in strategies:
        if s not in STRATEGY_CHOICES:
            raise CliError(f"unknown strategy {s!r}")
    if not strategies:
        raise CliError("at least one strategy is required")
    seeds = _parse_seeds(args.seeds)

    if args.pool:
        pool = pool_from_csv(Path(args.pool).read_text())
        inputs.append(args.pool)
    else:
        from .strategies import CandidatePool

        pool = CandidatePool(
            pairs=[(d.id, f.id) for f in dataset.features for d in dataset.drugs]
        )

    descriptions = None
    if args.descriptions:
        _, descriptions = descriptions_from_csv(Path(args.descriptions).read_text())
        inputs.append(args.descriptions)
    if "bandit" in strategies and descriptions is None:
        raise CliError("bandit strategy needs --descriptions")

    if args.expert == "oracle":
        if not args.truth:
            raise CliError("oracle expert needs --truth")
        truth_payload = json.loads(Path(args.truth).read_text())
        truth = GroundTruth(
            weights=np.array(truth_payload["weights"]),
            active=np.array(truth_payload["active"], dtype=bool),
            signs=np.array(truth_payload["signs"], dtype=np.int8),
        )
        inputs.append(args.truth)

        def make_expert(seed: int):
            return OracleExpert(
                dataset,
                truth,
                p_correct=args.p_correct,
                coverage=args.coverage,
                direction_known=args.direction_known,
                give_directions=not args.no_directions,
                seed=seed,
            )

    else:
        if not args.feedback:
            raise CliError("replay expert needs --feedback")
        table = _load_feedback(args.feedback)
        inputs.append(args.feedback)

        def make_expert(seed: int):  # noqa: ARG001 - replay ignores the seed
            return ReplayExpert(table)

    out = OutputSet(args.out)
    report: dict = {"budget": args.budget, "cadence": args.cadence, "seeds": []}
    for seed in seeds:
        row: dict = {"seed": seed, "auc": {}, "half_improvement": {}, "p_value": {}}
        random_aucs: list[float] = []
        for strat in strategies:
            if strat == "random":
                for r in range(args.random_runs):
                    run_seed = seed * 100003 + r
                    trace = run_elicitation_experiment(
                        dataset, pool, make_expert(seed), strategy="random",
                        budget=args.budget, cadence=args.cadence, seed=run_seed,
                        descriptions=descriptions, broadcast=args.broadcast,
                    )
                    out.add(
                        f"trace_random_{seed}_{r}.csv",
                        trace_csv(trace, dataset, include_wall_time=False),
                    )
                    out.add(f"queries_random_{seed}_{r}.csv", queries_log_csv(trace))
                    random_aucs.append(auc_mse(trace))
                row["auc"]["random"] = random_aucs
            else:
                trace = run_elicitation_experiment(
                    dataset, pool, make_expert(seed), strategy=strat,
                    budget=args.budget, cadence=args.cadence, seed=seed,
                    descriptions=descriptions, broadcast=args.broadcast,
                )
                out.add(
                    f"trace_{strat}_{seed}.csv",
                    trace_csv(trace, dataset, include_wall_time=False),
                )
                out.add(f"queries_{strat}_{seed}.csv", queries_log_csv(trace))
                row["auc"][strat] = auc_mse(trace)
                row["half_improvement"][strat] = queries_to_half_improvement(trace)
        if random_aucs:
            for strat in strategies:
                if strat != "random" and strat in row["auc"]:
                    row["p_value"][strat] = empirical_pvalue(
                        row["auc"][strat], random_aucs
                    )
        report["seeds"].append(row)
    out.add("report.json", json.dumps(report, indent=2, sort_keys=True) + "\n")
    out.add("manifest.json", _manifest("simulate", argv, seeds, inputs))
    out.commit()


def cmd_synth(args, argv: list[str]) -> None:
    config = SyntheticConfig(
        n_samples=args.n_samples,
        n_features=args.n_features,
        n_drugs=args.n_drugs,
        nonzero_per_drug=args.nonzero_per_drug,
        noise_sd=args.noise_sd,
        weight_scale=args.weight_scale,
        pool_features=args.pool_features,
        feature_model=args.feature_model,
        weight_dist=args.weight_dist,
        driver_features=args.driver_features,
    )
    dataset, truth, pool = generate_synthetic(config, np.random.default_rng(args.seed))
    out = OutputSet(args.out)
    out.add(
        "data.tsv",
        _matrix_csv(
            dataset.x_transform.invert(dataset.X),
            [f.id for f in dataset.features],
            list(dataset.sample_ids),
        ),
    )
    out.add(
        "response.tsv",
        _matrix_csv(
            dataset.y_transform.invert(dataset.Y),
            [d.id for d in dataset.drugs],
            list(dataset.sample_ids),
        ),
    )
    out.add("features.tsv", _features_tsv(dataset.features))
    out.add("drugs.tsv", _drugs_tsv(dataset.drugs))
    out.add(
        "truth.json",
        json.dumps(
            {
                "weights": [[float(v) for v in row] for row in truth.weights],
                "active": [[bool(v) for v in row] for row in truth.active],
                "signs": [[int(v) for v in row] for row in truth.signs],
            }
        )
        + "\n",
    )
    out.add("pool.csv", pool_to_csv(pool))
    out.add("manifest.json", _manifest("synth", argv, [args.seed], []))
    out.commit()


def cmd_descvec(args, argv: list[str]) -> None:
    features = read_features_tsv(args.features)
    drugs = read_drugs_tsv(args.drugs)
    inputs: list[str | Path] = [args.features, args.drugs, args.pathways]
    with open(args.pathways) as fh:
        gene_sets = parse_gmt(fh)
    targets = None
    if args.targets:
        with open(args.targets) as fh:
            targets = parse_drug_targets(fh, known_drugs=[d.id for d in drugs])
        inputs.append(args.targets)
    schema, vectors = build_description_vectors(features, drugs, gene_sets, targets)
    if args.pool:
        pool = pool_from_csv(Path(args.pool).read_text())
        vectors = {p: vectors[p] for p in pool.pairs if p in vectors}
        inputs.append(args.pool)
    out = OutputSet(args.out)
    out.add(
        "schema.json",
        json.dumps(
            {
                "slots": list(schema.slots),
                "length": schema.length,
                "pathways": list(schema.pathways),
            },
            indent=2,
        )
        + "\n",
    )
    out.add("descriptions.csv", descriptions_to_csv(schema.slots, vectors))
    out.add("manifest.json", _manifest("descvec", argv, [], inputs))
    out.commit()


def cmd_serve(args) -> None:
    from .service import load_service_config, serve

    config = load_service_config(args.config)
    try:
        serve(config)
    except OSError as exc:
        raise CliError(f"cannot serve on {config.host}:{config.port}: {exc}") from None


def cmd_rerun(args) -> None:
    payload = json.loads(Path(args.manifest).read_text())
    argv = list(payload["argv"])
    if args.out:
        if "--out" in argv:
            argv[argv.index("--out") + 1] = args.out
        else:
            argv += ["--out", args.out]
    code = main(argv)
    if code != 0:
        raise CliError(f"rerun of {payload['command']} failed with exit code {code}")


# ---------------------------------------------------------------------------
# Argument parsing


def _add_dataset_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--data", required=True, help="feature matrix TSV")
    p.add_argument("--response", required=True, help="response matrix TSV")
    p.add_argument("--features", help="feature metadata TSV")
    p.add_argument("--drugs", help="drug metadata TSV")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="elicit", description="Sparse regression with expert feedback."
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fit", help="fit the model and report LOO metrics")
    _add_dataset_args(p)
    p.add_argument("--feedback", help="feedback CSV to condition on")
    p.add_argument("--engine", choices=("ep", "gibbs"), default="ep")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--gibbs-samples", type=int, default=2000)
    p.add_argument("--gibbs-burnin", type=int, default=500)
    p.add_argument("--out", required=True)

    p = sub.add_parser("simulate", help="run elicitation strategies against an expert")
    _add_dataset_args(p)
    p.add_argument("--pool", help="candidate pool CSV; default all pairs")
    p.add_argument("--strategies", required=True, help="comma list of eig,bandit,random")
    p.add_argument("--budget", type=int, required=True)
    p.add_argument("--cadence", type=int, default=25)
    p.add_argument("--seeds", required=True, help="comma-separated run seeds")
    p.add_argument("--expert", choices=("oracle", "replay"), default="oracle")
    p.add_argument("--truth", help="ground-truth JSON for the oracle expert")
    p.add_argument("--p-correct", type=float, default=0.9)
    p.add_argument("--coverage", type=float, default=0.6)
    p.add_argument("--direction-known", type=float, default=1.0)
    p.add_argument("--no-directions", action="store_true",
                   help="strip directions from oracle answers")
    p.add_argument("--feedback", help="replay feedback CSV")
    p.add_argument("--descriptions", help="description vectors CSV for the bandit")
    p.add_argument("--random-runs", type=int, default=50,
                   help="number of random-strategy runs per seed")
    p.add_argument("--broadcast", action="store_true",
                   help="apply answers to all drugs of the answered drug's group")
    p.add_argument("--out", required=True)

    p = sub.add_parser("synth", help="generate a synthetic benchmark instance")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--n-samples", type=int, default=51)
    p.add_argument("--n-features", type=int, default=3032)
    p.add_argument("--n-drugs", type=int, default=12)
    p.add_argument("--nonzero-per-drug", type=int, default=25)
    p.add_argument("--noise-sd", type=float, default=0.7)
    p.add_argument("--weight-scale", type=float, default=0.3)
    p.add_argument("--pool-features", type=int, default=168)
    p.add_argument("--feature-model", choices=("binary", "gaussian"), default="binary")
    p.add_argument("--weight-dist", choices=("normal", "fixed"), default="normal")
    p.add_argument("--driver-features", type=int, default=0)
    p.add_argument("--out", required=True)

    p = sub.add_parser("descvec", help="build pair description vectors")
    p.add_argument("--features", required=True)
    p.add_argument("--drugs", required=True)
    p.add_argument("--pathways", required=True, help="gene sets GMT")
    p.add_argument("--targets", help="drug target TSV overriding drug metadata")
    p.add_argument("--pool", help="restrict output to pool pairs")
    p.add_argument("--out", required=True)

    p = sub.add_parser("serve", help="run the session service")
    p.add_argument("--config", help="flat key=value config file")

    p = sub.add_parser("rerun", help="re-execute a manifest")
    p.add_argument("manifest")
    p.add_argument("--out", help="redirect outputs to a different directory")

    return parser


def main(argv: list[str] | None = None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if args.command == "fit":
            cmd_fit(args, argv)
        elif args.command == "simulate":
            cmd_simulate(args, argv)
        elif args.command == "synth":
            cmd_synth(args, argv)
        elif args.command == "descvec":
            cmd_descvec(args, argv)
        elif args.command == "serve":
            cmd_serve(args)
        elif args.command == "rerun":
            cmd_rerun(args)
    except (CliError, DataError, ModelError, StrategyError, EvaluationError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
