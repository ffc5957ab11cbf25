"""Command-line entry point: data generation, training, synthesis, evaluation.

All commands operate on one run directory (--out): gen-data writes
OUT/dataset/, train-codec writes OUT/codec.ckpt, train-nar writes
OUT/nar.ckpt, generate/edit write images under OUT/, eval and bench write
key=value metric files. Every command is reproducible from (config, seed);
the resolved configuration is embedded in checkpoints, image comments, and
metric files.

Exit codes: 0 success, 2 usage error, 3 missing artifact, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import os
import sys
import time

import numpy as np

from . import codec as codec_mod
from . import data as data_mod
from . import decoder as decoder_mod
from . import predictor as pred_mod
from . import protocol, quantizers, training
from .config import RunConfig, load_config
from .numerics import ContractError, Rng, TrainingError

EXIT_USAGE = 2
EXIT_MISSING = 3
EXIT_NUMERIC = 4


class MissingArtifact(FileNotFoundError):
    pass


def _config_comment(cfg: RunConfig, seed: int) -> str:
    pairs = [f"{k}={v}" for k, v in sorted(cfg.to_meta().items())]
    return f"seed={seed} " + " ".join(pairs)


def _need(path: str, hint: str) -> str:
    if not os.path.exists(path):
        raise MissingArtifact(f"missing {path} ({hint})")
    return path


def _load_dataset(out_dir: str):
    manifest = _need(os.path.join(out_dir, "dataset", "manifest.tsv"),
                     "run `narpq gen-data` first")
    base = os.path.dirname(manifest)
    records = data_mod.load_manifest(manifest)
    samples = []
    for rel, caption in records:
        img = data_mod.read_ppm(os.path.join(base, rel))
        samples.append(data_mod.ToySample(img, caption, data_mod.parse_caption(caption)))
    return samples


def _write_metrics(path: str, pairs: list[tuple[str, str]]) -> None:
    with open(path, "w") as fh:
        for k, v in pairs:
            fh.write(f"{k}={v}\n")


def _print_metrics(pairs: list[tuple[str, str]]) -> None:
    for k, v in pairs:
        print(f"{k}={v}")


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_gen_data(args, cfg: RunConfig) -> int:
    rng = Rng(args.seed)
    n = args.n or (cfg.data.n_train + cfg.data.n_holdout)
    out = os.path.join(args.out, "dataset")
    data_mod.generate_dataset(n, rng, out_dir=out)
    with open(os.path.join(out, "run.cfg"), "w") as fh:
        fh.write(f"# seed={args.seed}\n" + cfg.to_text())
    print(f"wrote {n} samples to {out}")
    return 0


def cmd_train_codec(args, cfg: RunConfig) -> int:
    samples = _load_dataset(args.out)
    n_holdout = min(cfg.data.n_holdout, max(1, len(samples) // 10))
    images = np.stack([s.image for s in samples])
    train_imgs = images[: len(images) - n_holdout]
    rng = Rng(args.seed)
    cp = codec_mod.train_codec(train_imgs, cfg.codec, rng, cfg.codec_train)
    meta = cfg.to_meta()
    meta["seed"] = str(args.seed)
    codec_mod.save_codec(cp, os.path.join(args.out, "codec.ckpt"), meta)
    holdout_mse = codec_mod.reconstruction_mse(cp, images[len(images) - n_holdout :])
    for entry in cp.train_log:
        print(f"step={entry['step']} loss={entry['loss']:.6f} "
              f"recon_mse={entry['recon_mse']:.6f} used={entry['codebook_used_frac']:.3f}")
    print(f"holdout_mse={holdout_mse:.6f}")
    return 0


def cmd_train_nar(args, cfg: RunConfig) -> int:
    samples = _load_dataset(args.out)
    cp = codec_mod.load_codec(_need(os.path.join(args.out, "codec.ckpt"),
                                    "run `narpq train-codec` first"))
    n_holdout = min(cfg.data.n_holdout, max(1, len(samples) // 10))
    train_samples = samples[: len(samples) - n_holdout]
    rng = Rng(args.seed)
    grids, caps = training.tokenize_dataset(cp, train_samples)
    pcfg = cfg.predictor_config()
    vocab = training.build_vocab(cp.config)
    log: list = []
    pp = training.train_predictor(grids, caps, pcfg, vocab, rng,
                                  cfg.predictor_train, log=log)
    meta = cfg.to_meta()
    meta["seed"] = str(args.seed)
    pred_mod.save_predictor(pp, os.path.join(args.out, "nar.ckpt"), meta)
    for entry in log:
        print(f"step={entry['step']} loss={entry['loss']:.4f} ema={entry['loss_ema']:.4f}")
    return 0


def _load_models(args):
    cp = codec_mod.load_codec(_need(os.path.join(args.out, "codec.ckpt"),
                                    "run `narpq train-codec` first"))
    pp = pred_mod.load_predictor(_need(os.path.join(args.out, "nar.ckpt"),
                                       "run `narpq train-nar` first"))
    return cp, pp


def _parse_box(text: str) -> tuple[int, int, int, int]:
    try:
        x, y, w, h = (int(v) for v in text.split(","))
    except ValueError:
        raise ValueError(f"--box wants x,y,w,h integers, got {text!r}")
    return x, y, w, h


def _boxes_to_cell_mask(boxes, grid: int, inside: bool) -> np.ndarray:
    """Preservation mask from grid-cell boxes; True = cell is preserved."""
    covered = np.zeros((grid, grid), dtype=bool)
    for (x, y, w, h) in boxes:
        if w <= 0 or h <= 0 or x < 0 or y < 0 or x + w > grid or y + h > grid:
            raise ValueError(f"box {(x, y, w, h)} outside the {grid}x{grid} token grid")
        covered[y : y + h, x : x + w] = True
    return covered if inside else ~covered


def _text_condition(text: str) -> list[int]:
    words = text.strip().split()
    try:
        return data_mod.caption_ids(words)
    except KeyError as exc:
        raise ValueError(f"word {exc.args[0]!r} is not in the caption vocabulary "
                         f"{list(data_mod.VOCAB_WORDS)}")


def _ref_grid(cp, path: str) -> codec_mod.TokenGrid:
    return codec_mod.encode(cp, data_mod.read_ppm(_need(path, "reference image")))


def cmd_generate(args, cfg: RunConfig) -> int:
    cp, pp = _load_models(args)
    vocab = training.build_vocab(cp.config)
    sched = cfg.schedule.to_schedule()
    temp = cfg.schedule.temperature
    rng = Rng(args.seed)
    grid = cp.config.grid
    comment = _config_comment(cfg, args.seed)
    out_dir = os.path.join(args.out, "gen", args.task)
    os.makedirs(out_dir, exist_ok=True)

    def run_decode(cond, source=None, tag="", trace_dir=None):
        tokens, trace = decoder_mod.decode(pp, cond, vocab, sched, rng,
                                           temperature=temp, source=source)
        img = codec_mod.decode(cp, tokens)
        path = os.path.join(out_dir, f"{tag}.ppm")
        data_mod.write_ppm(path, img, comment=comment)
        if trace_dir:
            decoder_mod.render_trace(trace, cp, trace_dir, vocab.visual_mask_id,
                                     config_comment=comment)
        return path

    if args.task == "uncond":
        for i in range(args.n):
            run_decode(protocol.ConditionSet(), tag=f"sample_{i:03d}",
                       trace_dir=os.path.join(out_dir, f"trace_{i:03d}") if args.trace else None)
    elif args.task == "text2img":
        if not args.text:
            raise ValueError("--text is required for text2img")
        cond_text = _text_condition(args.text)
        for i in range(args.n):
            run_decode(protocol.ConditionSet(text=list(cond_text)), tag=f"sample_{i:03d}",
                       trace_dir=os.path.join(out_dir, f"trace_{i:03d}") if args.trace else None)
    elif args.task in ("local-edit", "text-local-edit"):
        if len(args.ref) < 2:
            raise ValueError("local editing wants --ref EDIT_IMAGE --ref PATTERN_IMAGE")
        if not args.box:
            raise ValueError("--box is required for local editing")
        if args.task == "text-local-edit" and not args.text:
            raise ValueError("--text is required for text-local-edit")
        edit_grid = _ref_grid(cp, args.ref[0])
        pattern_grid = _ref_grid(cp, args.ref[1])
        boxes = [_parse_box(b) for b in args.box]
        preserve = _boxes_to_cell_mask(boxes, grid, inside=False)
        x, y, w, h = boxes[0]
        vc = pattern_grid.crop(y, x, h, w)
        cond = protocol.ConditionSet(
            visuals=[vc],
            text=_text_condition(args.text) if args.task == "text-local-edit" else [],
            preservation=preserve)
        run_decode(cond, source=edit_grid, tag="edited")
    elif args.task in ("inpaint", "outpaint"):
        if not args.ref:
            raise ValueError(f"--ref IMAGE is required for {args.task}")
        if not args.box:
            raise ValueError(f"--box is required for {args.task}")
        source = _ref_grid(cp, args.ref[0])
        boxes = [_parse_box(b) for b in args.box]
        preserve = _boxes_to_cell_mask(boxes, grid, inside=args.task == "outpaint")
        cond = protocol.ConditionSet(
            text=_text_condition(args.text) if args.text else [],
            preservation=preserve)
        run_decode(cond, source=source, tag=args.task)
    elif args.task == "style-mix":
        if len(args.ref) < 2:
            raise ValueError("style-mix wants --ref IMAGE_A --ref IMAGE_B")
        grid_a = _ref_grid(cp, args.ref[0])
        grid_b = _ref_grid(cp, args.ref[1])
        levels = [float(v) for v in args.mix_levels.split(",")]
        base_tokens, _ = decoder_mod.decode(
            pp, protocol.ConditionSet(visuals=[grid_a]), vocab, sched, rng,
            temperature=temp)
        for li, level in enumerate(levels):
            if level <= 0.0:
                mixed = base_tokens.copy()
            else:
                cells = grid * grid
                n_redo = int(round(level * cells))
                order = rng.permutation(cells)
                keep = np.ones(cells, dtype=bool)
                keep[order[:n_redo]] = False
                if keep.all():
                    mixed = base_tokens.copy()
                else:
                    cond = protocol.ConditionSet(
                        visuals=[grid_b],
                        preservation=keep.reshape(grid, grid))
                    mixed, _ = decoder_mod.decode(pp, cond, vocab, sched, rng,
                                                  temperature=temp, source=base_tokens)
            img = codec_mod.decode(cp, mixed)
            data_mod.write_ppm(os.path.join(out_dir, f"mix_{li}_{level:.2f}.ppm"),
                               img, comment=comment)
    else:
        raise ValueError(f"unknown task {args.task!r}")
    print(f"wrote generations to {out_dir}")
    return 0


def cmd_edit(args, cfg: RunConfig) -> int:
    args.task = "text-local-edit" if args.text else "local-edit"
    args.n = 1
    args.trace = False
    args.mix_levels = ""
    return cmd_generate(args, cfg)


def _quantizer_vectors(seed: int = 0, n: int = 10000, dim: int = 32,
                       m_groups: int = 4, comps: int = 8) -> np.ndarray:
    """Synthetic ablation set: per-subspace independent Gaussian mixtures."""
    rng = Rng(seed)
    d = dim // m_groups
    parts = []
    for _ in range(m_groups):
        means = rng.uniform(-3.0, 3.0, size=(comps, d))
        which = rng.integers(0, comps, size=n)
        parts.append((means[which] + rng.normal(0.3, size=(n, d))).astype(np.float32))
    return np.concatenate(parts, axis=1)


def quantizer_table(seed: int = 0) -> dict[str, float]:
    vectors = _quantizer_vectors(seed)
    rng_seed = seed + 1
    pq = quantizers.train_pq(vectors, 4, 64, 25, Rng(rng_seed))
    vq = quantizers.train_vq(vectors, 64, 25, Rng(rng_seed))
    rq = quantizers.train_rq(vectors, 2, 64, 25, Rng(rng_seed))
    return {
        "quant_pq_m4_k64": quantizers.distortion(pq, vectors),
        "quant_vq_k64": quantizers.distortion(vq, vectors),
        "quant_rq_l2_k64": quantizers.distortion(rq, vectors),
    }


def cmd_eval(args, cfg: RunConfig) -> int:
    rng = Rng(args.seed)
    pairs: list[tuple[str, str]] = [("seed", str(args.seed))]
    for k, v in sorted(cfg.to_meta().items()):
        pairs.append((f"config.{k}", v))

    table = quantizer_table(seed=0)
    for k, v in table.items():
        pairs.append((k, f"{v:.6f}"))

    codec_path = os.path.join(args.out, "codec.ckpt")
    if os.path.exists(codec_path):
        cp = codec_mod.load_codec(codec_path)
        samples = _load_dataset(args.out)
        n_holdout = min(cfg.data.n_holdout, max(1, len(samples) // 10))
        holdout = samples[len(samples) - n_holdout :]
        images = np.stack([s.image for s in holdout])
        pairs.append(("recon_mse_holdout", f"{codec_mod.reconstruction_mse(cp, images):.6f}"))
        usage = codec_mod.codebook_usage(cp, images)
        pairs.append(("codebook_used_frac", f"{float((usage > 0).mean()):.4f}"))
        hits = sum(data_mod.attribute_oracle(
            codec_mod.decode(cp, codec_mod.encode(cp, s.image))) == s.spec for s in holdout)
        pairs.append(("oracle_recon_acc", f"{hits / len(holdout):.4f}"))

        nar_path = os.path.join(args.out, "nar.ckpt")
        if os.path.exists(nar_path):
            pp = pred_mod.load_predictor(nar_path)
            vocab = training.build_vocab(cp.config)
            sched = cfg.schedule.to_schedule()
            n_gen = args.n or 40
            match = 0
            for i in range(n_gen):
                spec = data_mod.random_spec(rng)
                cond = protocol.ConditionSet(text=data_mod.caption_ids(data_mod.caption(spec)))
                tokens, _ = decoder_mod.decode(pp, cond, vocab, sched, rng,
                                               temperature=cfg.schedule.temperature)
                est = data_mod.attribute_oracle(codec_mod.decode(cp, tokens))
                match += est.base_color == spec.base_color
            pairs.append(("text_match_rate", f"{match / n_gen:.4f}"))

    _write_metrics(os.path.join(args.out, "eval.txt"), pairs)
    _print_metrics(pairs)
    return 0


def cmd_bench(args, cfg: RunConfig) -> int:
    cp, pp = _load_models(args)
    vocab = training.build_vocab(cp.config)
    sched = cfg.schedule.to_schedule()
    rng = Rng(args.seed)
    cond = protocol.ConditionSet()
    cells = cp.config.grid ** 2

    t0 = time.perf_counter()
    _, trace = decoder_mod.decode(pp, cond, vocab, sched, rng,
                                  temperature=cfg.schedule.temperature)
    wall_nar = time.perf_counter() - t0
    t0 = time.perf_counter()
    _, ar_calls = decoder_mod.decode_greedy_ar(pp, cond, vocab, rng)
    wall_ar = time.perf_counter() - t0

    stable: list[tuple[str, str]] = [
        ("grid_cells", str(cells)),
        ("calls_nar", str(trace.calls)),
        ("calls_ar", str(ar_calls)),
        ("call_ratio", f"{ar_calls / trace.calls:.4f}"),
        ("seed", str(args.seed)),
    ]
    # wall-clock lines go to stdout only so the artifact stays byte-stable
    _write_metrics(os.path.join(args.out, "bench.txt"), stable)
    _print_metrics(stable)
    print(f"wall_nar_s={wall_nar:.4f}")
    print(f"wall_ar_s={wall_ar:.4f}")
    print(f"wall_ratio={wall_ar / max(wall_nar, 1e-9):.4f}")
    return 0


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    top = argparse.ArgumentParser(prog="narpq", description=__doc__,
                                  formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = top.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", default=None, help="key=value config file")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--out", default="runs", help="run directory")

    p = sub.add_parser("gen-data", help="write the synthetic captioned dataset")
    common(p)
    p.add_argument("--n", type=int, default=0, help="sample count (0: from config)")

    p = sub.add_parser("train-codec", help="train the image tokenizer")
    common(p)

    p = sub.add_parser("train-nar", help="train the masked token predictor")
    common(p)

    p = sub.add_parser("generate", help="synthesize images")
    common(p)
    p.add_argument("--task", required=True,
                   choices=["uncond", "text2img", "local-edit", "text-local-edit",
                            "inpaint", "outpaint", "style-mix"])
    p.add_argument("--text", default="")
    p.add_argument("--ref", action="append", default=[], help="reference image path")
    p.add_argument("--box", action="append", default=[],
                   help="x,y,w,h in token-grid cells; repeatable")
    p.add_argument("--mix-levels", default="0,0.25,0.5,0.75,1.0")
    p.add_argument("--n", type=int, default=4, help="images per task")
    p.add_argument("--trace", action="store_true", help="write per-round trace images")

    p = sub.add_parser("edit", help="local edit: regenerate a box from a pattern reference")
    common(p)
    p.add_argument("--text", default="")
    p.add_argument("--ref", action="append", default=[],
                   help="--ref EDIT_IMAGE --ref PATTERN_IMAGE")
    p.add_argument("--box", action="append", default=[], help="x,y,w,h in grid cells")

    p = sub.add_parser("eval", help="reconstruction, quantizer table, text match rate")
    common(p)
    p.add_argument("--n", type=int, default=0, help="generations for the match rate")

    p = sub.add_parser("bench", help="refinement vs greedy decoding cost")
    common(p)
    return top


_COMMANDS = {
    "gen-data": cmd_gen_data,
    "train-codec": cmd_train_codec,
    "train-nar": cmd_train_nar,
    "generate": cmd_generate,
    "edit": cmd_edit,
    "eval": cmd_eval,
    "bench": cmd_bench,
}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config)
        os.makedirs(args.out, exist_ok=True)
        return _COMMANDS[args.command](args, cfg)
    except MissingArtifact as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except (TrainingError, ContractError, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ValueError, IndexError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
