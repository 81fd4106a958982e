from __future__ import annotations

import argparse
import sys
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np

from .. import __version__, adapters
from ..adaptation import AdaptationPlan, adapt
from ..attention_maps import find_contrast_samples
from ..checkpoint import load_checkpoint, save_checkpoint
from ..common import ConfigError, PatchSpec, ViTConfig
from ..cost import MODES, PAPER, cost_table
from ..data import generate_synthetic_texture, load_dataset, save_dataset, to_three_channels
from ..experiment import ExperimentConfig, merge_sweeps, run_sweep
from ..heatmap import export_attention_heatmap
from ..model import VisionTransformer
from .base import BaseCLI


def _int_list(value: str) -> List[int]:
    try:
        return [int(part) for part in value.split(",") if part.strip()]
    except ValueError:
        raise ConfigError(f"Expected comma-separated integers, got {value!r}")


class RunCLI(BaseCLI):
    """Run a patch-size sweep from a JSON config."""

    prog = "vitlab run"
    description = (
        "Fine-tune one model per (patch size, seed), fuse the configured "
        "ensemble and write per-run, aggregated and markdown result tables."
    )

    def _add_arguments(self, parser):
        parser.add_argument("--config", required=True, help="Experiment JSON file")
        parser.add_argument("--out", default=None, help="Output directory")
        parser.add_argument(
            "--parallel",
            type=int,
            default=1,
            help="Number of runs executed in parallel processes (default: 1)",
        )
        parser.add_argument(
            "--resume",
            action="store_true",
            help="Skip runs whose metrics.json already exists",
        )

    def _run(self, args, available) -> int:
        config = ExperimentConfig.from_json(args.config)
        root = run_sweep(
            config,
            parallel=max(1, args.parallel),
            resume=args.resume,
            out_dir=args.out,
            reporter=self.make_reporter(),
        )
        print(f"Results written to {root}")
        return 0


class CostCLI(BaseCLI):
    """Print the analytic GFLOPs table."""

    prog = "vitlab cost"
    description = "Tokens and GFLOPs per test image for each patch size."

    def _add_arguments(self, parser):
        parser.add_argument(
            "--preset",
            default="vit_small",
            choices=["vit_small", "vit_micro"],
            help="Model preset (default: vit_small)",
        )
        parser.add_argument("--dims", type=int, choices=[2, 3], default=2)
        parser.add_argument("--edge", type=int, default=28, help="Input edge length")
        parser.add_argument("--patch-sizes", default="1,2,4,7,14,28")
        parser.add_argument("--ensemble", default="1,2,4")
        parser.add_argument("--mode", choices=MODES, default=PAPER)
        parser.add_argument("--classes", type=int, default=2)

    def _run(self, args, available) -> int:
        patch_sizes = _int_list(args.patch_sizes)
        depth = args.edge if args.dims == 3 else None
        spec = PatchSpec(p=max(patch_sizes), H=args.edge, W=args.edge, D=depth)
        config = ViTConfig.preset(args.preset, spec, args.classes)
        rows = cost_table(config, patch_sizes, _int_list(args.ensemble), mode=args.mode)

        print(f"{'patch':>8} {'tokens':>8} {'GFLOPs':>10} {'published':>10}")
        for row in rows:
            tokens = "" if row.T_total is None else str(row.T_total)
            published = "" if row.published is None else f"{row.published:.2f}"
            print(f"{row.label:>8} {tokens:>8} {row.gflops:>10.2f} {published:>10}")
        return 0


class AdaptCLI(BaseCLI):
    """Adapt a pretrained checkpoint to a new patch size, input and head."""

    prog = "vitlab adapt"
    description = (
        "Resize the patch embedding, optionally inflate it to 3D, interpolate "
        "positional embeddings and replace the classification head."
    )
    backend_arg_name = "patch_strategy"
    backend_short_flag = "-s"
    default_backend_env = "VITLAB_PATCH_STRATEGY"
    default_backend = "resample"
    backend_module = adapters
    backend_base_class = adapters.Base

    def _add_arguments(self, parser):
        parser.add_argument("input", help="Source checkpoint")
        parser.add_argument("-o", "--output", required=True, help="Output checkpoint")
        parser.add_argument("-p", "--patch-size", type=int, required=True)
        parser.add_argument("--dims", type=int, choices=[2, 3], default=2)
        parser.add_argument("--edge", type=int, default=28)
        parser.add_argument("-k", "--classes", type=int, required=True)
        parser.add_argument("--seed", type=int, default=0)
        parser.add_argument(
            "--reuse-head",
            action="store_true",
            help="Keep the head when it already has the requested class count",
        )
        parser.add_argument(
            "--no-normalize-inflation",
            dest="normalize_inflation",
            action="store_false",
            help="Do not divide the inflated 3D kernel by its depth",
        )

    def _run(self, args, available) -> int:
        depth = args.edge if args.dims == 3 else None
        plan = AdaptationPlan(
            target=PatchSpec(p=args.patch_size, H=args.edge, W=args.edge, D=depth),
            num_classes=args.classes,
            normalize_inflation=args.normalize_inflation,
            reuse_head=args.reuse_head,
            patch_strategy=args.patch_strategy,
        )
        adapter = available[args.patch_strategy].from_cli_args(args)
        ckpt = adapt(load_checkpoint(args.input), plan, seed=args.seed, adapter=adapter)
        save_checkpoint(ckpt, args.output)
        print(f"Adapted checkpoint written to {args.output}")
        return 0


class AttmapCLI(BaseCLI):
    """Export the attention heatmap of one dataset image."""

    prog = "vitlab attmap"
    description = "Write input, patch-grid overlay and attention heatmap PNGs."

    def _add_arguments(self, parser):
        parser.add_argument("checkpoint", help="2D model checkpoint")
        parser.add_argument("--dataset", required=True, help="Dataset archive")
        parser.add_argument("--split", default="test", choices=["train", "val", "test"])
        parser.add_argument(
            "--index",
            type=int,
            default=0,
            help="Sample index; with --contrast-with, position among the selected samples",
        )
        parser.add_argument("-o", "--output", required=True, help="Heatmap PNG path")
        parser.add_argument(
            "--contrast-with",
            metavar="CKPT",
            default=None,
            help=(
                "Baseline checkpoint; only samples it misclassifies and the main "
                "checkpoint classifies correctly are considered, and its heatmap "
                "is written to <stem>.contrast.png"
            ),
        )
        parser.add_argument("--batch-size", type=int, default=128)

    def _run(self, args, available) -> int:
        split = load_dataset(args.dataset)[args.split]
        if not args.contrast_with and not 0 <= args.index < len(split):
            raise ConfigError(f"Index {args.index} outside split of {len(split)}")
        checkpoint = load_checkpoint(args.checkpoint)
        baseline = None
        sample = args.index
        if args.contrast_with:
            baseline = load_checkpoint(args.contrast_with)
            chosen = find_contrast_samples(
                VisionTransformer.from_checkpoint(checkpoint),
                VisionTransformer.from_checkpoint(baseline),
                to_three_channels(split.images).astype(np.float32),
                split.labels,
                batch_size=args.batch_size,
            )
            if not 0 <= args.index < len(chosen):
                raise ConfigError(
                    f"Index {args.index} outside the {len(chosen)} samples "
                    f"{args.contrast_with} misclassifies and {args.checkpoint} gets right"
                )
            sample = int(chosen[args.index])

        image = to_three_channels(split.images[sample])
        export = export_attention_heatmap(checkpoint, image, args.output)
        print(
            f"Heatmap of sample {sample} written to {export.heatmap} "
            f"(predicted class {export.attention.prediction})"
        )
        if baseline is not None:
            output = Path(args.output)
            contrast = export_attention_heatmap(
                baseline, image, output.with_name(f"{output.stem}.contrast.png")
            )
            print(
                f"Baseline heatmap written to {contrast.heatmap} "
                f"(predicted class {contrast.attention.prediction})"
            )
        return 0


class SynthCLI(BaseCLI):
    """Generate the synthetic texture dataset archive."""

    prog = "vitlab synth"
    description = "Write the two-class synthetic texture dataset as an archive."

    def _add_arguments(self, parser):
        parser.add_argument("-o", "--output", required=True, help="Archive path")
        parser.add_argument("--n-per-class", type=int, default=100)
        parser.add_argument("--seed", type=int, default=0)
        parser.add_argument("--noise", type=float, default=0.1)

    def _run(self, args, available) -> int:
        bundle = generate_synthetic_texture(args.n_per_class, args.seed, noise=args.noise)
        path = save_dataset(bundle, args.output)
        sizes = "/".join(str(n) for n in bundle.sizes.values())
        print(f"Synthetic dataset ({sizes}) written to {Path(path)}")
        return 0


class MergeCLI(BaseCLI):
    """Average aggregated sweep results over dataset groups."""

    prog = "vitlab merge"
    description = (
        "Merge the aggregated.csv of every dataset sweep into averages over "
        "the 2D datasets, the 3D datasets and all datasets."
    )

    def _add_arguments(self, parser):
        parser.add_argument("results", help="Directory holding one sweep directory per dataset")
        parser.add_argument("--out", default=None, help="Output directory (default: results)")

    def _run(self, args, available) -> int:
        out = merge_sweeps(args.results, args.out)
        print(f"Merged results written to {out / 'merged.csv'} and {out / 'merged.md'}")
        return 0


VERBS = {
    "run": RunCLI,
    "cost": CostCLI,
    "adapt": AdaptCLI,
    "attmap": AttmapCLI,
    "synth": SynthCLI,
    "merge": MergeCLI,
}


def build_parser() -> argparse.ArgumentParser:
    """Top-level parser; each verb parses its own options."""
    parser = argparse.ArgumentParser(
        prog="vitlab",
        description="Patch-size experiments for Vision Transformers.",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    verbs = parser.add_subparsers(dest="verb", required=True)
    for name, cli in VERBS.items():
        verbs.add_parser(name, help=cli.description, add_help=False)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    """Entry point for vitlab."""
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = build_parser().parse_args(argv[:1])
    except SystemExit as exc:
        return exc.code or 0
    return VERBS[args.verb]().run(argv[1:])
