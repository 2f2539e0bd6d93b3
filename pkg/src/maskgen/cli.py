"""Command-line entry point: ``maskgen <command> [--config FILE] [flags]``."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np
import torch

from . import dataio
from .config import RunConfig, read_config_file
from .errors import ConfigError, MaskGenError
from .generation import (
    ColorSpec,
    GenerationRequest,
    attention_filename,
    blank_mask,
    generate_many,
    mask_steering_eval,
)
from .model import MaskGenModel
from .training import (
    SourceImage,
    TrainLog,
    attention_mass_inside,
    eval_mse,
    finetune,
    pretrain,
)

COMMANDS = ("make-data", "pretrain", "finetune", "generate", "inspect-attention", "eval-iou", "ablate")
TARGET_SHIFT = (0, 28)  # make-data's translated target for subject 0, in 64-pixel units


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # usage errors become one JSON line instead of argparse's multi-line text
    def error(self, message):
        raise _UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="maskgen", description="Mask-conditioned text-to-image diffusion toolkit")
    sub = p.add_subparsers(dest="command", required=True, metavar="{" + ",".join(COMMANDS) + "}")
    for name in COMMANDS:
        c = sub.add_parser(name)
        c.add_argument("--config", help="key = value configuration file")
        c.add_argument("--seed", type=int)
        c.add_argument("--out", help="output directory")
        c.add_argument("--steps", type=int,
                       help="pretrain: pretrain_steps; finetune/ablate: total split evenly over both phases; "
                            "generate/eval: sampling steps")
        c.add_argument("--checkpoint", help="model checkpoint (.mckpt)")
        c.add_argument("--base-checkpoint", help="pretrained checkpoint to fine-tune")
        c.add_argument("--mask", action="append", help="mask PNG path or 'blank'; repeatable")
        c.add_argument("--break-a-scene", action="store_true",
                       help="baseline mode: inject one blank mask instead of a pose mask")
        c.add_argument("--prompt")
        c.add_argument("--lambda-m", type=float)
        c.add_argument("--no-mask-attn-loss", action="store_true", help="drop the mask-token attention term")
        c.add_argument("--guidance", type=float)
        c.add_argument("--dump-attention", action="store_true")
        c.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override any configuration key")
    return p


def cli_overrides(args) -> dict:
    o = {}
    for item in args.set:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}", key=item)
        k, v = item.split("=", 1)
        o[k.strip()] = v.strip()
    if args.seed is not None:
        o["seed"] = args.seed
    if args.out is not None:
        o["out_dir"] = args.out
    if args.checkpoint is not None:
        o["checkpoint"] = args.checkpoint
    if args.base_checkpoint is not None:
        o["base_checkpoint"] = args.base_checkpoint
    if args.prompt is not None:
        o["prompt"] = args.prompt
    if args.lambda_m is not None:
        o["lambda_m"] = args.lambda_m
    if args.no_mask_attn_loss:
        o["mask_attn_loss"] = False
    if args.guidance is not None:
        o["guidance"] = args.guidance
    if args.dump_attention:
        o["dump_attention"] = True
    if args.break_a_scene:
        o["masks"] = ("blank",)
    elif args.mask:
        o["masks"] = tuple(args.mask)
    if args.steps is not None:
        if args.command == "pretrain":
            o["pretrain_steps"] = args.steps
        elif args.command in ("finetune", "ablate"):
            o["phase1_steps"] = args.steps // 2
            o["phase2_steps"] = args.steps - args.steps // 2
        elif args.command in ("generate", "inspect-attention", "eval-iou"):
            o["gen_steps"] = args.steps
    return o


def say(msg: str):
    print(msg, flush=True)


def new_model(rc: RunConfig) -> MaskGenModel:
    torch.manual_seed(rc["seed"])
    return MaskGenModel(rc.denoiser(), schedule_params=rc.schedule(),
                        mask_grid=rc["mask_grid"], max_prompt_len=rc["max_prompt_len"])


def load_model(path) -> MaskGenModel:
    if path is None:
        raise ConfigError("no checkpoint given (use --checkpoint or the checkpoint key)", key="checkpoint")
    return MaskGenModel.from_checkpoint(dataio.load_checkpoint(path))


def load_source(rc: RunConfig) -> SourceImage:
    size = rc["image_size"]
    if rc["source_image"]:
        if not rc["source_masks"]:
            raise ConfigError("source_image given without source_masks", key="source_masks")
        image, masks = dataio.load_pair(rc["source_image"], rc["source_masks"], size)
        return SourceImage(image, masks)
    return SourceImage.from_scene(dataio.toy_fixture(size))


def read_masks(rc: RunConfig) -> list:
    size = rc["image_size"]
    return [blank_mask(size) if m == "blank" else dataio.load_mask(m, size) for m in rc["masks"]]


# ---------------------------------------------------------------------------


def cmd_make_data(rc: RunConfig, out: Path):
    size = rc["image_size"]
    scene = dataio.toy_fixture(size)
    dataio.save_image(out / "toy_source.png", scene.image)
    for i, m in scene.masks.items():
        dataio.save_mask(out / f"toy_mask{i}.png", m)
    dx, dy = (v * size // 64 for v in TARGET_SHIFT)
    dataio.save_mask(out / "toy_target0.png", dataio.translate_mask(scene.masks[0], dx, dy))
    (out / "toy_caption.txt").write_text(scene.caption + "\n")
    corpus = out / "corpus"
    corpus.mkdir(exist_ok=True)
    rng = np.random.default_rng(rc["seed"])
    captions = []
    for k in range(rc["corpus_preview"]):
        s = dataio.sample_corpus_scene(rng, size, rc["pretrain_max_subjects"])
        dataio.save_image(corpus / f"scene_{k:04d}.png", s.image)
        for i, m in s.masks.items():
            dataio.save_mask(corpus / f"scene_{k:04d}_mask{i}.png", m)
        captions.append(f"scene_{k:04d}\t{s.caption}")
    (corpus / "captions.tsv").write_text("\n".join(captions) + "\n")
    say(f"wrote toy fixture and {rc['corpus_preview']} corpus scenes to {out}")


def cmd_pretrain(rc: RunConfig, out: Path):
    model = new_model(rc)
    tc = rc.train()
    rng = np.random.default_rng(10_000 + rc["seed"])
    held_out = [dataio.sample_corpus_scene(rng, rc["image_size"], tc.pretrain_max_subjects) for _ in range(16)]
    before = eval_mse(model, held_out)
    log = TrainLog()
    ckpt = pretrain(model, tc, log, say)
    after = eval_mse(model, held_out)
    dataio.save_checkpoint(out / "base.mckpt", ckpt)
    log.write_csv(out / "train_log.csv")
    log.write_phases(out / "phase_log.json")
    summary = {"eval_mse_init": before, "eval_mse_final": after}
    (out / "pretrain_eval.json").write_text(json.dumps(summary, indent=2))
    say(f"pretrain done: held-out mse {before:.4f} -> {after:.4f}")


def _finetune_into(rc: RunConfig, out: Path, tc=None):
    if rc["base_checkpoint"]:
        model = load_model(rc["base_checkpoint"])
    else:
        model = new_model(rc)
    source = load_source(rc)
    tc = tc or rc.train()
    log = TrainLog()
    ck1, ck2 = finetune(model, source, tc, log, say)
    out.mkdir(parents=True, exist_ok=True)
    dataio.save_checkpoint(out / "phase1.mckpt", ck1)
    dataio.save_checkpoint(out / "final.mckpt", ck2)
    log.write_csv(out / "train_log.csv")
    log.write_phases(out / "phase_log.json")
    return model, source


def cmd_finetune(rc: RunConfig, out: Path):
    _finetune_into(rc, out)
    say(f"wrote {out / 'phase1.mckpt'}, {out / 'final.mckpt'}, {out / 'train_log.csv'}")


def _write_attention(result, directory: Path):
    directory.mkdir(parents=True, exist_ok=True)
    for pos, (kind, m) in sorted(result.attention_maps.items()):
        dataio.save_gray(directory / attention_filename(pos, kind), m)


def cmd_generate(rc: RunConfig, out: Path, force_attention=False):
    model = load_model(rc["checkpoint"])
    req = GenerationRequest(rc["prompt"], read_masks(rc), rc["gen_steps"], rc["seed"], rc["guidance"])
    dump = force_attention or rc["dump_attention"]
    res = generate_many(model, [req], capture_attention=dump)[0]
    name = f"sample_{rc['seed']}"
    dataio.save_image(out / f"{name}.png", res.image)
    (out / f"{name}.json").write_text(json.dumps(res.metadata, indent=2))
    if dump:
        _write_attention(res, out / "attention")
    say(f"wrote {out / (name + '.png')}")


def cmd_eval_iou(rc: RunConfig, out: Path):
    model = load_model(rc["checkpoint"])
    if not rc["target_mask"] and not rc["masks"]:
        raise ConfigError("eval-iou needs target_mask or --mask", key="target_mask")
    target_path = rc["target_mask"] or rc["masks"][0]
    target = dataio.load_mask(target_path, rc["image_size"])
    color = ColorSpec(tuple(rc["eval_color"]), rc["eval_threshold"])
    seeds = [rc["seed"] + k for k in range(rc["eval_seeds"])]
    r = mask_steering_eval(model, rc["prompt"], target, color, seeds, rc["gen_steps"], rc["guidance"])
    for k, (a, b) in enumerate(zip(r.pop("images_shaped"), r.pop("images_blank"))):
        dataio.save_image(out / f"shaped_{seeds[k]}.png", a)
        dataio.save_image(out / f"blank_{seeds[k]}.png", b)
    r["margin"] = r["mean_shaped"] - r["mean_blank"]
    (out / "iou.json").write_text(json.dumps(r, indent=2))
    say(f"mean IoU shaped={r['mean_shaped']:.3f} blank={r['mean_blank']:.3f} margin={r['margin']:.3f}")


def cmd_ablate(rc: RunConfig, out: Path):
    base_tc = rc.train()
    results = {"with_mask_attn_loss": [], "without_mask_attn_loss": []}
    for k in range(rc["ablation_seeds"]):
        seed = base_tc.seed + k
        for label, flag in (("with_mask_attn_loss", True), ("without_mask_attn_loss", False)):
            tc = rc.train()
            tc.seed, tc.mask_attn_loss = seed, flag
            say(f"ablation seed {seed}: {label}")
            model, source = _finetune_into(rc, out / f"{label}_seed{seed}", tc)
            frac = attention_mass_inside(model, source)
            results[label].append({"seed": seed, "inside_fraction": frac,
                                   "mean": float(np.mean(list(frac.values())))})
    summary = {label: float(np.mean([r["mean"] for r in rs])) for label, rs in results.items()}
    summary["margin"] = summary["with_mask_attn_loss"] - summary["without_mask_attn_loss"]
    (out / "ablation.json").write_text(json.dumps({"runs": results, "summary": summary}, indent=2))
    say(f"inside-mask attention: with={summary['with_mask_attn_loss']:.4f} "
        f"without={summary['without_mask_attn_loss']:.4f} margin={summary['margin']:.4f}")


HANDLERS = {
    "make-data": cmd_make_data,
    "pretrain": cmd_pretrain,
    "finetune": cmd_finetune,
    "generate": cmd_generate,
    "inspect-attention": lambda rc, out: cmd_generate(rc, out, force_attention=True),
    "eval-iou": cmd_eval_iou,
    "ablate": cmd_ablate,
}


def _error_line(kind: str, message: str, key=None) -> str:
    return json.dumps({"error": kind, "key": key, "message": message})


def run_command(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    except _UsageError as e:
        print(_error_line("usage", str(e)), file=sys.stderr)
        return 2
    try:
        file_values = read_config_file(args.config) if args.config else {}
        rc = RunConfig.build(file_values, cli_overrides(args))
    except ConfigError as e:
        print(_error_line("config", str(e), e.key), file=sys.stderr)
        return 2
    out = Path(rc["out_dir"])
    try:
        out.mkdir(parents=True, exist_ok=True)
        rc.write_resolved(out / "resolved_config.json")
        HANDLERS[args.command](rc, out)
    except ConfigError as e:
        print(_error_line("config", str(e), e.key), file=sys.stderr)
        return 2
    except (MaskGenError, OSError, RuntimeError, ValueError) as e:
        print(_error_line("runtime", f"{type(e).__name__}: {e}"), file=sys.stderr)
        return 1
    return 0


def main():
    sys.exit(run_command())


if __name__ == "__main__":
    main()
