"""Command line entry points: embed-dataset and embed-query.

Errors are one JSON object on stderr; exit 2 for usage, 4 for failures.
"""

from __future__ import annotations

import argparse
import json
import sys

from .encoders import DEFAULT_MODEL, DecodeError, EncoderUnavailable, get_encoder
from .pipeline import NothingEmbedded, embed_dataset, embed_query


def _emit_error(kind: str, detail: str) -> None:
    print(json.dumps({"error": kind, "detail": detail}), file=sys.stderr)


def _encoder_args(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--model", default=DEFAULT_MODEL, help="encoder to use")
    parser.add_argument("--device", default="cpu", help="device for model encoders")
    parser.add_argument("--checkpoint", default=None, help="override the model checkpoint path")


def _build_encoder(args):
    kwargs = {}
    if args.model.startswith("clip"):
        kwargs["device"] = args.device
        if args.checkpoint:
            kwargs["checkpoint"] = args.checkpoint
    return get_encoder(args.model, **kwargs)


def embed_dataset_main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(prog="embed-dataset", description="embed a dataset manifest")
    parser.add_argument("--manifest", required=True, help="JSONL of {id,label,path}")
    parser.add_argument("--out", required=True)
    parser.add_argument("--batch-size", type=int, default=16)
    _encoder_args(parser)
    try:
        args = parser.parse_args(argv)
    except SystemExit:
        return 2
    try:
        manifest = embed_dataset(args.manifest, args.out, _build_encoder(args), batch_size=args.batch_size)
    except (EncoderUnavailable, NothingEmbedded, FileNotFoundError, ValueError) as exc:
        _emit_error(type(exc).__name__, str(exc))
        return 4
    print(json.dumps({"model": manifest["model"], "count": manifest["count"], "skipped": len(manifest["skipped"])}))
    return 0


def embed_query_main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(prog="embed-query", description="embed one query image")
    parser.add_argument("image")
    _encoder_args(parser)
    try:
        args = parser.parse_args(argv)
    except SystemExit:
        return 2
    try:
        record = embed_query(args.image, _build_encoder(args))
    except (DecodeError, EncoderUnavailable, FileNotFoundError) as exc:
        _emit_error(type(exc).__name__, str(exc))
        return 4
    print(json.dumps(record))
    return 0


if __name__ == "__main__":
    sys.exit(embed_dataset_main())
