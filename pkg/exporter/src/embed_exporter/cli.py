"""Export command: prompt list in, embedding table file out."""

from __future__ import annotations

import argparse
import json
import os
import re
import sys
import tempfile
from pathlib import Path

import numpy as np

from .encoders import EncoderLoadError, load_encoder

SENSOR_PROMPT_RE = re.compile(r"^A sensor of (.+) at the (\d+) timestamp$")


def read_prompts(path: str | Path) -> list[str]:
    """Unique prompts in first-seen order; blank lines dropped."""
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    return list(dict.fromkeys(line for line in lines if line.strip()))


def write_table(path: str | Path, encoder_id: str, dim: int, prompts, vectors: np.ndarray) -> None:
    """Atomic write of the line-delimited table (temp file + rename)."""
    path = Path(path)
    fd, tmp_name = tempfile.mkstemp(dir=path.parent or Path("."), suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            fh.write(json.dumps({"dim": dim, "encoder": encoder_id}) + "\n")
            for prompt, vec in zip(prompts, vectors):
                fh.write(json.dumps({"prompt": prompt, "vec": vec.tolist()}) + "\n")
        os.replace(tmp_name, path)
    except BaseException:
        if os.path.exists(tmp_name):
            os.unlink(tmp_name)
        raise


def semantic_sanity(prompts, vectors: np.ndarray) -> str | None:
    """Soft check: same sensor across timestamps should out-correlate
    different sensors at the same timestamp. Returns a warning string on
    violation, None otherwise (or when the prompt set has no such pairs)."""
    by_key: dict[tuple[str, str], int] = {}
    for i, p in enumerate(prompts):
        match = SENSOR_PROMPT_RE.match(p)
        if match:
            by_key[(match.group(1), match.group(2))] = i
    sensors = sorted({s for s, _ in by_key})
    stamps = sorted({t for _, t in by_key})
    if len(sensors) < 2 or len(stamps) < 2:
        return None
    s0, s1, t0, t1 = sensors[0], sensors[1], stamps[0], stamps[1]
    needed = [(s0, t0), (s0, t1), (s1, t0)]
    if not all(k in by_key for k in needed):
        return None
    anchor = vectors[by_key[(s0, t0)]]
    same_sensor = float(np.dot(anchor, vectors[by_key[(s0, t1)]]))
    same_stamp = float(np.dot(anchor, vectors[by_key[(s1, t0)]]))
    if same_sensor <= same_stamp:
        return (
            f"semantic sanity: sim({s0!r}@{t0},{s0!r}@{t1})={same_sensor:.4f} does not exceed "
            f"sim({s0!r}@{t0},{s1!r}@{t0})={same_stamp:.4f}"
        )
    return None


def cmd_export(args) -> int:
    prompts_path = Path(args.prompts)
    if not prompts_path.exists():
        print(f"error: prompt file not found: {prompts_path}", file=sys.stderr)
        return 1
    try:
        encoder = load_encoder(args.encoder, dim=args.dim)
    except EncoderLoadError as err:
        print(f"error: {err}", file=sys.stderr)
        return 1
    prompts = read_prompts(prompts_path)
    if not prompts:
        print("error: prompt file is empty", file=sys.stderr)
        return 1
    chunks = [
        encoder.encode_batch(prompts[i : i + args.batch_size])
        for i in range(0, len(prompts), args.batch_size)
    ]
    vectors = np.concatenate(chunks, axis=0)
    for warning in encoder.warnings:
        print(f"warning: truncated to {warning.kept_tokens} tokens: {warning.prompt[:60]}...", file=sys.stderr)
    complaint = semantic_sanity(prompts, vectors)
    if complaint:
        print(f"warning: {complaint}", file=sys.stderr)
    write_table(args.out, encoder.encoder_id, encoder.dim, prompts, vectors)
    print(f"wrote {len(prompts)} embeddings (dim {encoder.dim}, encoder {encoder.encoder_id}) to {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="embed-exporter", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("export", help="encode a prompt list into an embedding table")
    p.add_argument("--prompts", required=True, help="line-delimited UTF-8 prompt file")
    p.add_argument("--encoder", default="hash", help="hash | hash/<dim> | clip:<model>")
    p.add_argument("--out", required=True, help="output table file")
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--dim", type=int, default=512, help="output width for the hash encoder")
    p.set_defaults(func=cmd_export)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
