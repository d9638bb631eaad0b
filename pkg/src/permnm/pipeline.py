"""Model ingestion, pruning-run orchestration, reports, benchmark, CLI.

Models and calibration data travel in a deliberately tiny container: a
JSON manifest naming tensors (shape, dtype, byte offset/length, plus
layer topology) next to a raw little-endian float32 blob. Any ecosystem
can emit it with a few lines: dump each row-major f32 tensor into one
concatenated file, record offsets in the JSON.

The CLI exposes four subcommands:

  prune        train permutations, fold, export compressed layers
  compare      identity vs heuristic vs learned vs (small inputs) oracle
  bench        index-gather vs dense-matmul permutation timing
  gen-fixture  synthetic models, calibration sets, adversarial fixture

Every run is deterministic for a fixed seed; reports echo the full
config and carry "report_version": 1. PERMNM_THREADS bounds layerwise
parallelism (scheduling only, never results).
"""

from __future__ import annotations

import argparse
import json
import os
import statistics
import sys
import time
from dataclasses import dataclass, field

import numpy as np

from .assignment import dense_permutation
from .numerics import gather_columns, make_rng, matmul
from .permlearn import (
    Model,
    ModelLayer,
    TrainConfig,
    evaluate_permutation,
    fold_and_export,
    loss_mse,
    metric_scores,
    train,
)
from .reference import (
    count_partitions,
    heuristic_cp,
    oracle_best_partition,
    permutation_from_grouping,
)
from .sparsity import NMConfig, nm_mask, retained_score, validate_nm_mask

__all__ = [
    "ContainerError",
    "TensorContainer",
    "generate_fixture",
    "load_calibration",
    "load_model",
    "main",
    "run_bench",
    "run_compare",
    "run_prune",
    "save_model",
]

_FORMAT = "permnm-container"
_CONTAINER_VERSION = 1

# compare runs the exhaustive oracle only below this candidate count
_ORACLE_FEASIBLE = 10_000


class ContainerError(ValueError):
    """Manifest or blob violates the container contract."""


# ---------------------------------------------------------------------------
# tensor container


@dataclass
class TensorContainer:
    """Named f32 tensors plus optional layer topology.

    `topology` is {"layers": [{"name", "weight", "predecessor"}, ...]}
    in execution order; `meta` is free-form and round-trips untouched.
    """

    tensors: dict[str, np.ndarray]
    topology: dict | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        for name, t in self.tensors.items():
            t = np.ascontiguousarray(t, dtype=np.float32)
            if t.ndim < 1:
                raise ContainerError(f"tensor {name!r} must have at least 1 axis")
            self.tensors[name] = t

    def save(self, manifest_path: str) -> None:
        blob_path = os.path.splitext(manifest_path)[0] + ".bin"
        entries = []
        chunks = []
        offset = 0
        for name, t in self.tensors.items():
            raw = t.astype("<f4", copy=False).tobytes(order="C")
            entries.append(
                {
                    "name": name,
                    "shape": list(t.shape),
                    "dtype": "f32",
                    "byte_offset": offset,
                    "byte_length": len(raw),
                }
            )
            chunks.append(raw)
            offset += len(raw)
        manifest = {
            "format": _FORMAT,
            "container_version": _CONTAINER_VERSION,
            "blob": os.path.basename(blob_path),
            "tensors": entries,
        }
        if self.topology is not None:
            manifest["topology"] = self.topology
        if self.meta:
            manifest["meta"] = self.meta
        with open(blob_path, "wb") as f:
            f.write(b"".join(chunks))
        with open(manifest_path, "w") as f:
            json.dump(manifest, f, indent=2)
            f.write("\n")

    @classmethod
    def load(cls, manifest_path: str) -> "TensorContainer":
        try:
            with open(manifest_path) as f:
                manifest = json.load(f)
        except json.JSONDecodeError as e:
            raise ContainerError(f"malformed manifest: {e}") from e
        if not isinstance(manifest, dict):
            raise ContainerError("malformed manifest: not a JSON object")
        for key in ("format", "blob", "tensors"):
            if key not in manifest:
                raise ContainerError(f"manifest missing field {key!r}")
        if manifest["format"] != _FORMAT:
            raise ContainerError(
                f"unrecognized container format {manifest['format']!r}"
            )
        blob_path = os.path.join(
            os.path.dirname(os.path.abspath(manifest_path)), manifest["blob"]
        )
        try:
            with open(blob_path, "rb") as f:
                blob = f.read()
        except OSError as e:
            raise ContainerError(f"cannot read blob {manifest['blob']!r}: {e}") from e
        tensors: dict[str, np.ndarray] = {}
        spans: list[tuple[int, int, str]] = []
        for entry in manifest["tensors"]:
            for key in ("name", "shape", "dtype", "byte_offset", "byte_length"):
                if key not in entry:
                    raise ContainerError(f"tensor entry missing field {key!r}")
            name = entry["name"]
            if name in tensors:
                raise ContainerError(f"duplicate tensor name {name!r}")
            if entry["dtype"] != "f32":
                raise ContainerError(
                    f"unsupported dtype {entry['dtype']!r} for tensor {name!r}"
                )
            shape = tuple(int(s) for s in entry["shape"])
            if any(s < 0 for s in shape):
                raise ContainerError(f"tensor {name!r} has negative shape {shape}")
            count = int(np.prod(shape, dtype=np.int64)) if shape else 1
            offset, length = int(entry["byte_offset"]), int(entry["byte_length"])
            if offset < 0 or length < 0:
                raise ContainerError(f"tensor {name!r} has negative extent")
            if count * 4 != length:
                raise ContainerError(
                    f"tensor {name!r}: shape {shape} needs {count * 4} bytes, "
                    f"manifest says {length}"
                )
            if offset + length > len(blob):
                raise ContainerError("blob shorter than manifest extent")
            spans.append((offset, offset + length, name))
            tensors[name] = (
                np.frombuffer(blob[offset : offset + length], dtype="<f4")
                .reshape(shape)
                .copy()
            )
        spans.sort()
        for (s0, e0, n0), (s1, e1, n1) in zip(spans, spans[1:]):
            if s1 < e0:
                raise ContainerError(f"tensors {n0!r} and {n1!r} overlap in blob")
        return cls(
            tensors=tensors,
            topology=manifest.get("topology"),
            meta=manifest.get("meta", {}),
        )


def _cast(t: np.ndarray, precision: str) -> np.ndarray:
    if precision == "f32":
        return t
    if precision == "f64":
        return t.astype(np.float64)
    raise ValueError(f"unknown precision {precision!r}")


def load_model(path: str, precision: str = "f32") -> Model:
    """Load a container with topology into a Model at the given precision."""
    container = TensorContainer.load(path)
    if not container.topology or "layers" not in container.topology:
        raise ContainerError("manifest has no topology; not a model container")
    layers = []
    for entry in container.topology["layers"]:
        for key in ("name", "weight"):
            if key not in entry:
                raise ContainerError(f"topology entry missing field {key!r}")
        wname = entry["weight"]
        if wname not in container.tensors:
            raise ContainerError(f"topology references unknown tensor {wname!r}")
        layers.append(
            ModelLayer(
                name=entry["name"],
                weight=_cast(container.tensors[wname], precision),
                predecessor=entry.get("predecessor"),
            )
        )
    return Model(layers=layers)


def save_model(model: Model, path: str, meta: dict | None = None) -> None:
    container = TensorContainer(
        tensors={l.name: l.weight.astype(np.float32) for l in model.layers},
        topology={
            "layers": [
                {"name": l.name, "weight": l.name, "predecessor": l.predecessor}
                for l in model.layers
            ]
        },
        meta=meta or {},
    )
    container.save(path)


def load_calibration(path: str, precision: str = "f32") -> np.ndarray:
    """Load calibration samples: the tensor named 'calib', or the only one."""
    container = TensorContainer.load(path)
    if "calib" in container.tensors:
        t = container.tensors["calib"]
    elif len(container.tensors) == 1:
        t = next(iter(container.tensors.values()))
    else:
        raise ContainerError(
            f"calibration container must hold a tensor named 'calib' or a "
            f"single tensor; found {sorted(container.tensors)}"
        )
    if t.ndim != 2:
        raise ContainerError(f"calibration tensor must be 2-D, got shape {t.shape}")
    return _cast(t, precision)


# ---------------------------------------------------------------------------
# report assembly


def _layer_rows(
    model: Model,
    calib: np.ndarray,
    tcfg: TrainConfig,
    cfg: NMConfig,
    solutions,
    with_oracle: bool,
) -> list[dict]:
    acts = model.activations(calib)
    rows = []
    for layer in model.layers:
        sol = solutions[layer.name]
        w = layer.weight
        x, y = acts[layer.name]
        scores = metric_scores(tcfg.metric, w, x)
        identity = np.arange(w.shape[1], dtype=np.int64)
        id_loss, id_mask, id_ret = evaluate_permutation(w, x, y, identity, cfg, scores)
        heur_perm = heuristic_cp(scores, cfg, sol.boundaries)
        heur_loss, heur_mask, heur_ret = evaluate_permutation(
            w, x, y, heur_perm, cfg, scores
        )
        learned_loss, learned_mask, learned_ret = evaluate_permutation(
            w, x, y, sol.permutation, cfg, scores
        )
        for mask in (id_mask, heur_mask, learned_mask, sol.mask):
            validate_nm_mask(mask, cfg)
        row = {
            "name": layer.name,
            "c_out": int(w.shape[0]),
            "c_in": int(w.shape[1]),
            "identity_loss": id_loss,
            "heuristic_cp_loss": heur_loss,
            "learned_loss": learned_loss,
            "oracle_loss": None,
            "retained_scores": {
                "identity": id_ret,
                "heuristic_cp": heur_ret,
                "learned": learned_ret,
                "oracle": None,
            },
            "mask_density": cfg.keep / cfg.group,
            "mask_valid": True,
            "trained": sol.trained,
            "note": sol.note,
        }
        if with_oracle:
            total = 1
            for i, start in enumerate(sol.boundaries):
                end = (
                    sol.boundaries[i + 1]
                    if i + 1 < len(sol.boundaries)
                    else w.shape[1]
                )
                total *= count_partitions(end - start, cfg.group)
            if total <= _ORACLE_FEASIBLE:
                result = oracle_best_partition(
                    w, x, tcfg.metric, cfg, sol.boundaries
                )
                operm = permutation_from_grouping(result.best_grouping, w.shape[1])
                o_loss, _, o_ret = evaluate_permutation(w, x, y, operm, cfg, scores)
                row["oracle_loss"] = o_loss
                row["retained_scores"]["oracle"] = o_ret
                row["oracle_candidates"] = result.evaluated_count
            else:
                row["oracle_candidates"] = total
        rows.append(row)
    return rows


def _resolve_threads(threads: int | None) -> int:
    if threads is not None:
        return max(1, int(threads))
    env = os.environ.get("PERMNM_THREADS")
    if env is None:
        return 1
    try:
        return max(1, int(env))
    except ValueError as e:
        raise ValueError(f"PERMNM_THREADS must be an integer, got {env!r}") from e


def _run(
    command: str,
    model_path: str,
    calib_path: str,
    out_dir: str | None,
    nm: str = "2:4",
    metric: str = "wanda",
    block_size: int = 64,
    steps: int = 50,
    lr: float = 1e-3,
    sinkhorn_iters: int = 5,
    tau_start: float = 1.0,
    tau_end: float = 0.1,
    mode: str = "layerwise",
    partial_layers: str | None = None,
    seed: int = 0,
    precision: str = "f32",
    threads: int | None = None,
) -> dict:
    t0 = time.perf_counter()
    cfg = NMConfig.parse(nm)
    model = load_model(model_path, precision)
    calib = load_calibration(calib_path, precision)
    tcfg = TrainConfig(
        learning_rate=lr,
        steps=steps,
        sinkhorn_iters=sinkhorn_iters,
        tau_start=tau_start,
        tau_end=tau_end,
        block_size=block_size,
        metric=metric,
        mode=mode,
        seed=seed,
        partial_layers=partial_layers,
    )
    solutions = train(model, calib, tcfg, cfg, threads=_resolve_threads(threads))
    report = {
        "report_version": 1,
        "command": command,
        "config": {
            "model": model_path,
            "calib": calib_path,
            "nm": str(cfg),
            "metric": metric,
            "block_size": block_size,
            "steps": steps,
            "lr": lr,
            "sinkhorn_iters": sinkhorn_iters,
            "tau_start": tau_start,
            "tau_end": tau_end,
            "mode": mode,
            "partial_layers": partial_layers,
            "seed": seed,
            "precision": precision,
        },
        "seed": seed,
        "mode": mode,
        "layers": _layer_rows(
            model, calib, tcfg, cfg, solutions, with_oracle=command == "compare"
        ),
    }
    if mode == "endtoend":
        # layer rows stay layerwise evaluations; the joint objective is global
        report["endtoend_loss"] = solutions[model.layers[-1].name].achieved_loss
    if command == "prune":
        if out_dir is None:
            raise ValueError("prune requires --out")
        os.makedirs(out_dir, exist_ok=True)
        folded, exports, sidecar = fold_and_export(model, solutions)
        for name, compressed in exports.items():
            compressed.save(os.path.join(out_dir, f"{name}.pnmc"))
        with open(os.path.join(out_dir, "permutations.json"), "w") as f:
            json.dump(sidecar, f, indent=2)
            f.write("\n")
        report["exports"] = {
            "compressed_layers": sorted(exports),
            "sidecar": "permutations.json",
        }
    report["wall_clock_s"] = time.perf_counter() - t0
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        with open(os.path.join(out_dir, "report.json"), "w") as f:
            json.dump(report, f, indent=2)
            f.write("\n")
    return report


def run_prune(model_path, calib_path, out_dir, **kwargs) -> dict:
    """Train, fold, export; returns the report (also written to out_dir)."""
    return _run("prune", model_path, calib_path, out_dir, **kwargs)


def run_compare(model_path, calib_path, out_dir=None, **kwargs) -> dict:
    """Evaluate identity / heuristic / learned (and the exhaustive oracle
    where the candidate count permits) on one model+seed; returns the report."""
    return _run("compare", model_path, calib_path, out_dir, **kwargs)


# ---------------------------------------------------------------------------
# permutation micro-benchmark


def run_bench(n: int, iterations: int = 5, rows: int = 256) -> dict:
    """Median timings for permuting columns by index gather vs dense matmul.

    The dense route multiplies by an n-by-n permutation matrix, the
    gather route indexes columns directly. Both routes run one warmup
    pass and then write into preallocated outputs, so the timings
    compare data movement against arithmetic rather than allocator
    noise. The ratio is hardware dependent and reported without any
    built-in assertion.
    """
    if n < 2:
        raise ValueError(f"n must be >= 2, got {n}")
    if iterations < 1:
        raise ValueError(f"iterations must be >= 1, got {iterations}")
    rng = make_rng(0)
    w = rng.standard_normal((rows, n)).astype(np.float32)
    perm = rng.permutation(n).astype(np.int64)
    dense = dense_permutation(perm, dtype=np.float32)
    check = bool(np.array_equal(gather_columns(w, perm), matmul(w, dense)))

    out_g = np.empty_like(w)
    out_m = np.empty_like(w)
    np.take(w, perm, axis=1, out=out_g)
    np.matmul(w, dense, out=out_m)
    gather_times = []
    matmul_times = []
    for _ in range(iterations):
        t0 = time.perf_counter()
        np.take(w, perm, axis=1, out=out_g)
        gather_times.append(time.perf_counter() - t0)
        t0 = time.perf_counter()
        np.matmul(w, dense, out=out_m)
        matmul_times.append(time.perf_counter() - t0)
    gather_s = statistics.median(gather_times)
    matmul_s = statistics.median(matmul_times)
    return {
        "n": n,
        "rows": rows,
        "iterations": iterations,
        "gather_s": gather_s,
        "matmul_s": matmul_s,
        "ratio": matmul_s / gather_s if gather_s > 0 else float("inf"),
        "routes_agree": check,
    }


# ---------------------------------------------------------------------------
# fixture generation


def _gen_mlp(dims: list[int], seed: int) -> TensorContainer:
    if len(dims) < 2:
        raise ValueError(f"mlp needs at least 2 dims, got {dims}")
    rng = make_rng(seed)
    tensors = {}
    layers = []
    prev_name = None
    for i in range(len(dims) - 1):
        name = f"fc{i + 1}"
        tensors[name] = rng.standard_normal((dims[i + 1], dims[i])).astype(np.float32)
        layers.append({"name": name, "weight": name, "predecessor": prev_name})
        prev_name = name
    return TensorContainer(
        tensors=tensors,
        topology={"layers": layers},
        meta={"kind": "mlp", "dims": dims, "seed": seed},
    )


def _gen_calib(dims: list[int], seed: int) -> TensorContainer:
    if len(dims) != 2:
        raise ValueError(f"calib needs dims [samples, features], got {dims}")
    rng = make_rng(seed)
    return TensorContainer(
        tensors={"calib": rng.standard_normal(tuple(dims)).astype(np.float32)},
        meta={"kind": "calib", "dims": dims, "seed": seed},
    )


def _gen_mismatch(seed: int, max_trials: int = 10_000) -> TensorContainer:
    """Search 4x8 magnitude instances for the score/loss mismatch.

    Finds weights and calibration where the score-maximizing grouping
    retains MORE total importance than identity yet produces a LARGER
    output MSE, then persists that instance as a single-layer model plus
    calibration in one container.
    """
    cfg = NMConfig.parse("2:4")
    boundaries = [0]
    for trial in range(max_trials):
        rng = np.random.Generator(
            np.random.Philox(np.random.SeedSequence([seed, trial]))
        )
        w = rng.standard_normal((4, 8)).astype(np.float32)
        x = rng.standard_normal((32, 8)).astype(np.float32)
        scores = np.abs(w)
        y = x @ w.T
        id_mask = nm_mask(scores, cfg)
        id_ret = retained_score(scores, id_mask)
        id_mse = loss_mse(y, x @ (w * id_mask).T)
        p = heuristic_cp(scores, cfg, boundaries)
        s_hat = scores[:, p]
        h_mask = nm_mask(s_hat, cfg)
        h_ret = retained_score(s_hat, h_mask)
        h_mse = loss_mse(y, x[:, p] @ (w[:, p] * h_mask).T)
        if h_ret > id_ret and h_mse > id_mse:
            return TensorContainer(
                tensors={"layer0": w, "calib": x},
                topology={
                    "layers": [
                        {"name": "layer0", "weight": "layer0", "predecessor": None}
                    ]
                },
                meta={
                    "kind": "mismatch",
                    "seed": seed,
                    "trial": trial,
                    "nm": str(cfg),
                    "metric": "magnitude",
                    "identity_retained": float(id_ret),
                    "heuristic_retained": float(h_ret),
                    "identity_mse": float(id_mse),
                    "heuristic_mse": float(h_mse),
                },
            )
    raise RuntimeError(
        f"no score/loss mismatch found in {max_trials} trials for seed {seed}"
    )


def generate_fixture(kind: str, dims: list[int] | None, seed: int, out_path: str) -> dict:
    """Write a deterministic synthetic fixture container; returns its meta."""
    if kind == "mlp":
        container = _gen_mlp(dims or [16, 8, 4], seed)
    elif kind == "calib":
        container = _gen_calib(dims or [128, 1024], seed)
    elif kind == "mismatch":
        container = _gen_mismatch(seed)
    else:
        raise ValueError(f"unknown fixture kind {kind!r}")
    container.save(out_path)
    return container.meta


# ---------------------------------------------------------------------------
# CLI


def _add_run_flags(p: argparse.ArgumentParser, out_required: bool) -> None:
    p.add_argument("--model", required=True, help="model container manifest")
    p.add_argument("--calib", required=True, help="calibration container manifest")
    p.add_argument("--nm", default="2:4", help="sparsity pattern N:M (zeros:group)")
    p.add_argument("--metric", choices=["magnitude", "wanda"], default="wanda")
    p.add_argument("--block-size", type=int, default=64)
    p.add_argument("--steps", type=int, default=50)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--sinkhorn-iters", type=int, default=5)
    p.add_argument("--tau-start", type=float, default=1.0)
    p.add_argument("--tau-end", type=float, default=0.1)
    p.add_argument("--mode", choices=["layerwise", "endtoend"], default="layerwise")
    p.add_argument(
        "--partial-layers",
        default=None,
        help="train only these layers: names/indices, or last:K",
    )
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=out_required, default=None, help="output directory")
    p.add_argument("--precision", choices=["f32", "f64"], default="f32")


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="permnm",
        description="Learnable channel permutation for N:M pruning",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_prune = sub.add_parser("prune", help="train, fold, and export")
    _add_run_flags(p_prune, out_required=True)

    p_cmp = sub.add_parser("compare", help="method comparison report")
    _add_run_flags(p_cmp, out_required=False)

    p_bench = sub.add_parser("bench", help="gather vs dense-matmul timing")
    p_bench.add_argument("--n", type=int, default=2048)
    p_bench.add_argument("--iterations", type=int, default=5)
    p_bench.add_argument("--rows", type=int, default=256)
    p_bench.add_argument("--out", default=None, help="optional report path")

    p_gen = sub.add_parser("gen-fixture", help="write a synthetic fixture")
    p_gen.add_argument("--kind", choices=["mlp", "calib", "mismatch"], required=True)
    p_gen.add_argument(
        "--dims", default=None, help="comma-separated sizes, e.g. 16,8,4"
    )
    p_gen.add_argument("--seed", type=int, default=0)
    p_gen.add_argument("--out", required=True, help="manifest path to write")
    return parser


def _run_args(args: argparse.Namespace) -> dict:
    return dict(
        nm=args.nm,
        metric=args.metric,
        block_size=args.block_size,
        steps=args.steps,
        lr=args.lr,
        sinkhorn_iters=args.sinkhorn_iters,
        tau_start=args.tau_start,
        tau_end=args.tau_end,
        mode=args.mode,
        partial_layers=args.partial_layers,
        seed=args.seed,
        precision=args.precision,
    )


def main(argv: list[str] | None = None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        if args.command == "prune":
            report = run_prune(args.model, args.calib, args.out, **_run_args(args))
            print(json.dumps(report, indent=2))
        elif args.command == "compare":
            report = run_compare(args.model, args.calib, args.out, **_run_args(args))
            print(json.dumps(report, indent=2))
        elif args.command == "bench":
            result = run_bench(args.n, args.iterations, args.rows)
            if args.out:
                with open(args.out, "w") as f:
                    json.dump(result, f, indent=2)
                    f.write("\n")
            print(json.dumps(result, indent=2))
        elif args.command == "gen-fixture":
            dims = (
                [int(d) for d in args.dims.split(",")] if args.dims else None
            )
            meta = generate_fixture(args.kind, dims, args.seed, args.out)
            print(json.dumps({"written": args.out, "meta": meta}, indent=2))
        else:  # pragma: no cover - argparse enforces the choices
            raise ValueError(f"unknown command {args.command!r}")
    except (ValueError, TypeError, KeyError, OSError, RuntimeError) as e:
        print(
            json.dumps({"error": {"type": type(e).__name__, "message": str(e)}}),
            file=sys.stderr,
        )
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
