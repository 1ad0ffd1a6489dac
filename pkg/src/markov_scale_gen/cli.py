"""Command-line shell: dataset, tokenizer training, training, sampling,
cost benchmarking, window ablation, and analysis reports.

Exit codes: 0 success, 2 configuration error, 3 numeric/runtime error,
4 IO or checkpoint-format error.
"""

from __future__ import annotations

import argparse
import os
import sys
from dataclasses import asdict, replace

import numpy as np

from .autodiff import NumericError, Tensor, no_grad, resize_array
from .backbone import MarkovModel, ModelConfig
from .checkpoint import CheckpointData, CheckpointError, load_checkpoint, save_checkpoint
from .config import ConfigError, RunConfig, load_run_config
from .costmodel import MODES, compare, memory_estimate, preset_schedule
from .dataset import generate_dataset, load_dataset
from .diagnostics import perturb_experiment, power_law_fit, rfa_score
from .ppm import write_ppm
from .sampler import generate, generate_batch
from .tokenizer import (
    ResidualPyramid,
    ScaleSchedule,
    TokenizerConfig,
    TokenizerModel,
    encode_features,
    train_tokenizer,
)
from .trainer import TrainConfig, evaluate, make_optimizer, train


# ---------------------------------------------------------------------------
# report files


def write_csv(path, rows: list[dict], columns: list[str]) -> None:
    with open(path, "w") as f:
        f.write(",".join(columns) + "\n")
        for row in rows:
            f.write(",".join(str(row[c]) for c in columns) + "\n")


def write_dat(path, rows: list[dict], columns: list[str]) -> None:
    """gnuplot-friendly: commented header, whitespace-separated columns."""
    with open(path, "w") as f:
        f.write("# " + " ".join(columns) + "\n")
        for row in rows:
            f.write(" ".join(str(row[c]) for c in columns) + "\n")


def _parse_int_list(raw: str) -> list[int]:
    return [int(p) for p in raw.split(",") if p.strip()]


def _parse_float_list(raw: str) -> list[float]:
    return [float(p) for p in raw.split(",") if p.strip()]


# ---------------------------------------------------------------------------
# checkpoint adapters


def save_tokenizer_checkpoint(path, model: TokenizerModel, step: int) -> None:
    tensors = {name: p.data for name, p in model.params.items()}
    tensors["codebook.entries"] = model._entries
    tensors["ema.count"] = model._ema_count
    tensors["ema.sum"] = model._ema_sum
    save_checkpoint(
        path,
        CheckpointData(
            config={
                "kind": "tokenizer",
                "tokenizer": model.config.to_dict(),
                "image_side": model.image_side,
            },
            step=step,
            tensors=tensors,
        ),
    )


def load_tokenizer_checkpoint(path) -> TokenizerModel:
    data = load_checkpoint(path)
    if data.config.get("kind") != "tokenizer":
        raise CheckpointError(f"{path}: not a tokenizer checkpoint")
    cfg = TokenizerConfig.from_dict(data.config["tokenizer"])
    model = TokenizerModel(cfg, data.config["image_side"], np.random.default_rng(0))
    for name, p in model.params.items():
        if name not in data.tensors:
            raise CheckpointError(f"{path}: missing tensor {name}")
        if data.tensors[name].shape != p.data.shape:
            raise CheckpointError(
                f"{path}: tensor {name} shape {data.tensors[name].shape} vs {p.data.shape}"
            )
        p.data = data.tensors[name].astype(model.dtype, copy=True)
    model._entries = data.tensors["codebook.entries"].astype(model.dtype, copy=True)
    model._ema_count = data.tensors["ema.count"].astype(np.float64, copy=True)
    model._ema_sum = data.tensors["ema.sum"].astype(np.float64, copy=True)
    return model


def save_model_checkpoint(path, model, opt, run_cfg: RunConfig, step, rng_state) -> None:
    tensors = {name: p.data for name, p in model.params.items()}
    state = opt.state_dict()
    for name, arr in state["m"].items():
        tensors["opt.m." + name] = arr
    for name, arr in state["v"].items():
        tensors["opt.v." + name] = arr
    save_checkpoint(
        path,
        CheckpointData(
            config={
                "kind": "model",
                "model": model.config.to_dict(),
                "train": asdict(run_cfg.train),
                "kernel": run_cfg.kernel,
                "model_seed": run_cfg.model_seed,
            },
            step=step,
            rng_state=rng_state,
            tensors=tensors,
            opt_scalars={"step_count": state["step_count"]},
        ),
    )


def load_model_checkpoint(path) -> tuple[MarkovModel, CheckpointData]:
    data = load_checkpoint(path)
    if data.config.get("kind") != "model":
        raise CheckpointError(f"{path}: not a model checkpoint")
    cfg = ModelConfig.from_dict(data.config["model"])
    model = MarkovModel(cfg, seed=data.config.get("model_seed", 0))
    for name, p in model.params.items():
        if name not in data.tensors:
            raise CheckpointError(f"{path}: missing tensor {name}")
        if tuple(data.tensors[name].shape) != p.data.shape:
            raise CheckpointError(
                f"{path}: tensor {name} shape {data.tensors[name].shape} vs {p.data.shape}"
            )
        p.data = data.tensors[name].astype(model.dtype, copy=True)
    return model, data


def restore_optimizer(opt, data: CheckpointData) -> None:
    state = {
        "step_count": data.opt_scalars["step_count"],
        "m": {},
        "v": {},
    }
    for key, arr in data.tensors.items():
        if key.startswith("opt.m."):
            state["m"][key[len("opt.m.") :]] = arr
        elif key.startswith("opt.v."):
            state["v"][key[len("opt.v.") :]] = arr
    opt.load_state_dict(state)


# ---------------------------------------------------------------------------
# dataset plumbing


def encode_dataset(tok: TokenizerModel, images: np.ndarray, chunk: int = 64):
    """Encoder features then greedy quantization for every image."""
    cfg = tok.config
    cb = tok.codebook
    pyramids = []
    with no_grad():
        for start in range(0, images.shape[0], chunk):
            feats = tok.encoder_forward(
                Tensor(images[start : start + chunk].astype(tok.dtype))
            ).data
            for feat in feats:
                pyr, _ = encode_features(feat, cb, cfg.schedule, cfg.kernel)
                pyramids.append(pyr)
    return pyramids, cb


def _load_training_inputs(args, run_cfg: RunConfig):
    images, labels = load_dataset(args.dataset)
    if images.shape[0] == 0:
        raise ConfigError([f"dataset at {args.dataset} is empty; generate images first"])
    tok = load_tokenizer_checkpoint(args.tokenizer)
    problems = []
    if tok.config.schedule.sizes != run_cfg.schedule.sizes:
        problems.append(
            f"tokenizer schedule {tok.config.schedule.sizes} != config schedule {run_cfg.schedule.sizes}"
        )
    if tok.config.vocab_size != run_cfg.model.vocab_size:
        problems.append(
            f"tokenizer vocab {tok.config.vocab_size} != model vocab {run_cfg.model.vocab_size}"
        )
    if tok.config.code_dim != run_cfg.model.code_dim:
        problems.append(
            f"tokenizer code_dim {tok.config.code_dim} != model code_dim {run_cfg.model.code_dim}"
        )
    if labels.size and labels.max() >= run_cfg.model.num_classes:
        problems.append(
            f"dataset has class {labels.max()}, model.num_classes is {run_cfg.model.num_classes}"
        )
    if problems:
        raise ConfigError(problems)
    pyramids, cb = encode_dataset(tok, images)
    return tok, pyramids, labels, cb


# ---------------------------------------------------------------------------
# commands


def cmd_dataset(args) -> int:
    index = generate_dataset(args.out, args.count, args.seed)
    print(f"wrote {len(index)} images and {os.path.join(args.out, 'labels.txt')}")
    return 0


def cmd_tokenizer_train(args) -> int:
    run_cfg = load_run_config(args.config, args.set)
    images, _ = load_dataset(args.dataset)
    if images.shape[0] == 0:
        raise ConfigError([f"dataset at {args.dataset} is empty; generate images first"])
    model, log = train_tokenizer(images, run_cfg.tokenizer)
    for rec in log:
        print(f"epoch {rec['epoch']:3d} step {rec['step']:5d} recon_mse {rec['recon_mse']:.5f}")
    save_tokenizer_checkpoint(args.out, model, run_cfg.tokenizer.steps)
    print(f"tokenizer checkpoint: {args.out}")
    return 0


def cmd_train(args) -> int:
    run_cfg = load_run_config(args.config, args.set)
    tok, pyramids, labels, cb = _load_training_inputs(args, run_cfg)
    if args.resume:
        model, data = load_model_checkpoint(args.resume)
        if model.config.to_dict() != run_cfg.model.to_dict():
            raise ConfigError(
                ["resume checkpoint model config differs from the supplied config"]
            )
        opt = make_optimizer(model, run_cfg.train)
        restore_optimizer(opt, data)
        rng = np.random.default_rng(run_cfg.train.seed)
        rng.bit_generator.state = data.rng_state
        start_step = data.step
    else:
        model = MarkovModel(run_cfg.model, seed=run_cfg.model_seed)
        opt = make_optimizer(model, run_cfg.train)
        rng = np.random.default_rng(run_cfg.train.seed)
        start_step = 0

    def on_step(step, record):
        if step % run_cfg.checkpoint_every == 0 or step == run_cfg.train.steps:
            save_model_checkpoint(args.out, model, opt, run_cfg, step, rng.bit_generator.state)

    history = train(
        model,
        pyramids,
        labels,
        cb,
        run_cfg.train,
        metrics_path=args.metrics,
        on_step=on_step,
        opt=opt,
        rng=rng,
        start_step=start_step,
    )
    if history:
        first, last = history[0], history[-1]
        print(
            f"steps {first['step']}..{last['step']}  loss {first['loss']:.4f} -> {last['loss']:.4f}"
        )
    if run_cfg.train.steps == start_step:
        save_model_checkpoint(
            args.out, model, opt, run_cfg, start_step, rng.bit_generator.state
        )
    print(f"model checkpoint: {args.out}")
    return 0


def cmd_sample(args) -> int:
    model, data = load_model_checkpoint(args.checkpoint)
    tok = load_tokenizer_checkpoint(args.tokenizer)
    kernel = data.config.get("kernel", "bilinear")
    os.makedirs(args.out, exist_ok=True)
    seeds = [args.seed + i for i in range(args.count)]
    results = generate_batch(
        model,
        tok.codebook,
        [args.class_id] * args.count,
        seeds,
        tokenizer=tok,
        temperature=args.temperature,
        top_k=args.top_k if args.top_k > 0 else None,
        kernel=kernel,
    )
    for i, (image, pyramid) in enumerate(results):
        name = f"sample_c{args.class_id}_s{seeds[i]}"
        write_ppm(os.path.join(args.out, name + ".ppm"), image)
        if args.dump_pyramids:
            np.savez(
                os.path.join(args.out, name + ".npz"),
                **{f"scale_{t}": g for t, g in enumerate(pyramid.grids)},
            )
    print(f"wrote {len(results)} images to {args.out}")
    return 0


def cmd_bench(args) -> int:
    cfg = ModelConfig(
        schedule=ScaleSchedule((1,)),
        depth=args.depth,
        width=64 * args.depth,
        heads=args.depth,
        window=args.window,
    )
    modes = list(MODES) if args.mode == "both" else [args.mode]
    rows = []
    for res in args.resolutions:
        sch = preset_schedule(res)
        for mode in modes:
            rep = memory_estimate(cfg, sch, mode, args.batch, args.bytes_per_elem)
            for r in rep.rows():
                r.update(resolution=res, mode=mode, total_bytes=r["kv_bytes"] + r["act_bytes"])
                rows.append(r)
    columns = [
        "resolution",
        "mode",
        "step",
        "tokens",
        "cumulative",
        "attn_pairs",
        "pool_pairs",
        "kv_bytes",
        "act_bytes",
        "total_bytes",
    ]
    write_csv(args.csv, rows, columns)
    if args.dat:
        write_dat(args.dat, rows, columns)
    print(f"per-step cost table: {args.csv}")
    if args.mode == "both":
        print("resolution  full_peak_bytes  markov_peak_bytes  ratio")
        for row in compare(
            depth=args.depth,
            batch=args.batch,
            bytes_per_elem=args.bytes_per_elem,
            resolutions=tuple(args.resolutions),
            window=args.window,
        ):
            print(
                f"{row['resolution']:>10}  {row['full_peak_bytes']:>15.3e}  "
                f"{row['markov_peak_bytes']:>17.3e}  {row['ratio']:.3f}"
            )
    return 0


def cmd_ablate_window(args) -> int:
    run_cfg = load_run_config(args.config, args.set)
    tok, pyramids, labels, cb = _load_training_inputs(args, run_cfg)
    rows = []
    for n in args.windows:
        mcfg = replace(run_cfg.model, window=n).require_valid()
        model = MarkovModel(mcfg, seed=run_cfg.model_seed)
        history = train(model, pyramids, labels, cb, run_cfg.train)
        eval_loss = evaluate(model, pyramids, labels, cb, kernel=run_cfg.kernel)
        rows.append(
            {
                "window": n,
                "train_loss": history[-1]["loss"] if history else float("nan"),
                "eval_loss": eval_loss,
            }
        )
        print(f"window {n}: train_loss {rows[-1]['train_loss']:.4f} eval_loss {eval_loss:.4f}")
    write_csv(args.csv, rows, ["window", "train_loss", "eval_loss"])
    print(f"ablation table: {args.csv}")
    return 0


def _analyze_rfa(args) -> int:
    model, data = load_model_checkpoint(args.checkpoint)
    tok = load_tokenizer_checkpoint(args.tokenizer)
    kernel = data.config.get("kernel", "bilinear")
    _, pyramid, trace = generate(
        model,
        tok.codebook,
        args.class_id,
        tokenizer=tok,
        seed=args.seed,
        temperature=args.temperature,
        record_trace=True,
        kernel=kernel,
    )
    sch = model.config.schedule
    cb = tok.codebook
    rows = []
    if args.layer == "embed":
        # out: codebook lookup of the sampled grid; in: the downsampled
        # accumulated map that fed the earlier scale's embedding.
        for t in range(2, sch.num_scales + 1):
            out_feat = cb.entries[pyramid.grids[t - 1]]
            for k in range(2, t):
                in_feat = resize_array(trace.fhat_steps[k - 2], sch.sizes[k - 1], kernel)
                score = rfa_score(out_feat, in_feat, seed=args.seed)
                rows.append({"out_scale": t, "in_scale": k, "score": score})
    else:
        layer = int(args.layer.split(":", 1)[1])
        feats = []
        with no_grad():
            for k, tokens in enumerate(trace.state_tokens):
                hidden: list = []
                side = 1 if k == 0 else sch.sizes[k]
                model.forward_tokens(
                    Tensor(tokens), np.arange(tokens.shape[0]), collect_hidden=hidden
                )
                feats.append(hidden[layer].reshape(side, side, model.config.width))
        for t in range(1, len(feats)):
            for k in range(t):
                score = rfa_score(feats[t], feats[k], seed=args.seed)
                rows.append({"out_scale": t + 1, "in_scale": k + 1, "score": score})
    write_csv(args.csv, rows, ["out_scale", "in_scale", "score"])
    if args.dat:
        write_dat(args.dat, rows, ["out_scale", "in_scale", "score"])
    print(f"alignment scores: {args.csv}")
    return 0


def _analyze_perturb(args) -> int:
    model, data = load_model_checkpoint(args.checkpoint)
    tok = load_tokenizer_checkpoint(args.tokenizer)
    kernel = data.config.get("kernel", "bilinear")
    rows = []
    for scale in args.scales:
        for sigma in args.sigmas:
            res = perturb_experiment(
                model,
                tok.codebook,
                scale,
                sigma,
                args.seeds,
                tokenizer=tok,
                temperature=args.temperature,
                kernel=kernel,
            )
            rows.append(
                {"scale": scale, "sigma": sigma, "mse": res["mse"], "l1": res["l1"]}
            )
            print(f"scale {scale} sigma {sigma}: mse {res['mse']:.6f} l1 {res['l1']:.6f}")
    write_csv(args.csv, rows, ["scale", "sigma", "mse", "l1"])
    if args.dat:
        write_dat(args.dat, rows, ["scale", "sigma", "mse", "l1"])
    print(f"perturbation table: {args.csv}")
    return 0


def _read_xy(path) -> tuple[list[float], list[float]]:
    xs, ys = [], []
    with open(path) as f:
        for line in f:
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.replace(",", " ").split()
            if parts[0].lower() in ("x", "xs"):
                continue
            if len(parts) < 2:
                raise ValueError(f"{path}: expected two columns, got {line!r}")
            xs.append(float(parts[0]))
            ys.append(float(parts[1]))
    return xs, ys


def _analyze_scaling(args) -> int:
    if args.input:
        xs, ys = _read_xy(args.input)
    elif args.xs and args.ys:
        xs, ys = args.xs, args.ys
    else:
        raise ConfigError(["analyze scaling needs --input FILE or both --xs and --ys"])
    a, b, r2 = power_law_fit(xs, ys)
    print(f"y = {a:.6g} * x^{b:.6g}   R2 = {r2:.6f}")
    if args.csv:
        write_csv(args.csv, [{"a": a, "b": b, "r2": r2}], ["a", "b", "r2"])
    return 0


def cmd_analyze(args) -> int:
    if args.what == "rfa":
        return _analyze_rfa(args)
    if args.what == "perturb":
        return _analyze_perturb(args)
    return _analyze_scaling(args)


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="markov-scale-gen",
        description="Markovian scale prediction: tokenizer, trainer, sampler, cost model, diagnostics.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add_config(p):
        p.add_argument("--config", default=None, help="dotted-key config file")
        p.add_argument(
            "--set",
            action="append",
            default=[],
            metavar="KEY=VALUE",
            help="override a config key (repeatable)",
        )

    p = sub.add_parser("dataset", help="generate the procedural shape dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, default=512)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_dataset)

    p = sub.add_parser("tokenizer-train", help="train the image tokenizer")
    add_config(p)
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True, help="tokenizer checkpoint path")
    p.set_defaults(func=cmd_tokenizer_train)

    p = sub.add_parser("train", help="train the scale-prediction model")
    add_config(p)
    p.add_argument("--dataset", required=True)
    p.add_argument("--tokenizer", required=True, help="tokenizer checkpoint")
    p.add_argument("--out", required=True, help="model checkpoint path")
    p.add_argument("--metrics", default=None, help="JSON-lines metrics path")
    p.add_argument("--resume", default=None, help="checkpoint to continue from")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sample", help="generate images from a trained model")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--tokenizer", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--class-id", type=int, default=0)
    p.add_argument("--count", type=int, default=4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--temperature", type=float, default=1.0)
    p.add_argument("--top-k", type=int, default=0, help="0 disables filtering")
    p.add_argument("--dump-pyramids", action="store_true")
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("bench", help="analytic memory/attention cost report")
    p.add_argument("--depth", type=int, default=24)
    p.add_argument("--batch", type=int, default=25)
    p.add_argument("--bytes-per-elem", type=int, default=2)
    p.add_argument("--window", type=int, default=3)
    p.add_argument("--resolutions", type=_parse_int_list, default=[256, 512, 1024])
    p.add_argument("--mode", choices=["markov", "full-context", "both"], default="both")
    p.add_argument("--csv", required=True)
    p.add_argument("--dat", default=None)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("ablate-window", help="train/eval across window sizes")
    add_config(p)
    p.add_argument("--dataset", required=True)
    p.add_argument("--tokenizer", required=True)
    p.add_argument("--windows", type=_parse_int_list, default=[1, 2, 3, 4])
    p.add_argument("--csv", required=True)
    p.set_defaults(func=cmd_ablate_window)

    p = sub.add_parser("analyze", help="alignment, perturbation, scaling-fit reports")
    p.add_argument("what", choices=["rfa", "perturb", "scaling"])
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--tokenizer", default=None)
    p.add_argument("--class-id", type=int, default=0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--seeds", type=_parse_int_list, default=[0, 1, 2])
    p.add_argument("--temperature", type=float, default=1.0)
    p.add_argument("--layer", default="block:-1", help="'embed' or 'block:INDEX'")
    p.add_argument("--scales", type=_parse_int_list, default=[1])
    p.add_argument("--sigmas", type=_parse_float_list, default=[0.0, 1.0])
    p.add_argument("--xs", type=_parse_float_list, default=None)
    p.add_argument("--ys", type=_parse_float_list, default=None)
    p.add_argument("--input", default=None, help="two-column x,y file for scaling fits")
    p.add_argument("--csv", default="analysis.csv")
    p.add_argument("--dat", default=None)
    p.set_defaults(func=cmd_analyze)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"config error:\n{e}", file=sys.stderr)
        return 2
    except CheckpointError as e:
        print(f"checkpoint error: {e}", file=sys.stderr)
        return 4
    except (NumericError, FloatingPointError, ZeroDivisionError) as e:
        print(f"numeric error: {e}", file=sys.stderr)
        return 3
    except ValueError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except OSError as e:
        print(f"io error: {e}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
