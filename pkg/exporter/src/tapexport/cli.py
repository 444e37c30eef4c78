"""tapexport command line: export, dump-ref, fixture."""

from __future__ import annotations

import argparse
import json
import sys

from .export import ExportError, ExportSpec, dump_reference, export_onnx
from .fixture import write_fixture
from .graph import ConversionError


def _spec_from_args(args) -> ExportSpec:
    taps = [t.strip() for t in (args.taps or "").split(",") if t.strip()]
    return ExportSpec(
        backbone=args.backbone,
        size=args.size,
        taps=taps,
        weights=args.weights,
        seed=args.seed,
    )


def cmd_export(args) -> int:
    spec = _spec_from_args(args)
    onnx_path, manifest_path = export_onnx(spec, args.out)
    print(f"graph -> {onnx_path}")
    print(f"manifest -> {manifest_path}")
    if args.ref_images:
        ref = dump_reference(spec, args.out, count=args.ref_images, seed=args.ref_seed)
        print(f"references -> {ref}")
    return 0


def cmd_dump_ref(args) -> int:
    spec = _spec_from_args(args)
    ref = dump_reference(
        spec, args.out, image_dir=args.images, count=args.count, seed=args.ref_seed
    )
    print(f"references -> {ref}")
    return 0


def cmd_fixture(args) -> int:
    onnx_path, manifest_path = write_fixture(args.out, c1=args.c1, c2=args.c2, size=args.size)
    print(f"graph -> {onnx_path}")
    print(f"manifest -> {manifest_path}")
    return 0


def _backbone_args(p):
    p.add_argument("--backbone", required=True, help="resnet18|resnet50|vgg16|efficientnet_b5")
    p.add_argument("--size", type=int, default=256, help="input resolution (static)")
    p.add_argument("--taps", help="comma-separated stage names; default: three middle stages")
    p.add_argument("--weights", default=None,
                   help='torchvision weights tag, e.g. "DEFAULT"; omit for random init')
    p.add_argument("--seed", type=int, default=0, help="init seed when weights are random")
    p.add_argument("--ref-seed", type=int, default=7, dest="ref_seed")
    p.add_argument("--out", required=True)


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="tapexport",
                                     description="Export tap-output ONNX backbones")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("export", help="convert a torchvision backbone to ONNX + taps.json")
    _backbone_args(p)
    p.add_argument("--ref-images", type=int, default=0, dest="ref_images",
                   help="also dump N synthetic reference images/activations")
    p.set_defaults(func=cmd_export)

    p = sub.add_parser("dump-ref", help="dump reference activations as NPY + checksums")
    _backbone_args(p)
    p.add_argument("--images", help="directory of PNG/JPEG images (default: synthetic)")
    p.add_argument("--count", type=int, default=10, help="synthetic image count")
    p.set_defaults(func=cmd_dump_ref)

    p = sub.add_parser("fixture", help="write the two-conv CI fixture graph")
    p.add_argument("--c1", type=int, default=8)
    p.add_argument("--c2", type=int, default=4)
    p.add_argument("--size", type=int, default=32)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_fixture)

    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ExportError, ConversionError, OSError) as exc:
        print(json.dumps({"error": "export", "detail": str(exc)}), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
