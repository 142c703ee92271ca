#!/usr/bin/env python3
"""Export a byte-level BPE vocabulary stored in a GGUF file to the portable
fixlab tokenizer format (gzipped JSON).

The GGUF vocab-only files shipped with llama.cpp (models/ggml-vocab-*.gguf)
are the source for the fixtures under crates/core/data/tokenizers.

    python3 tools/export_gguf_tokenizer.py ggml-vocab-gpt-neox.gguf \
        --family gpt-neox --pretokenizer gpt2 --normalizer nfc \
        --bos-policy none --out crates/core/data/tokenizers/gpt-neox.json.gz

    python3 tools/export_gguf_tokenizer.py ggml-vocab-llama-bpe.gguf \
        --family llama3 --pretokenizer llama3 --bos-policy auto_prepend \
        --rank-merges --out crates/core/data/tokenizers/llama3.json.gz

With --rank-merges the merge list is omitted and merge priority is the rank
(id) of the merged token, which is how tiktoken-derived vocabularies work.
"""

import argparse
import gzip
import json

from gguf import GGUFReader

NORMAL = 1
CONTROL = 3
USER_DEFINED = 4


def strings(field):
    return [bytes(field.parts[i]).decode("utf-8") for i in field.data]


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("gguf")
    ap.add_argument("--family", required=True)
    ap.add_argument("--pretokenizer", required=True, choices=["gpt2", "llama3"])
    ap.add_argument("--normalizer", choices=["nfc"], default=None)
    ap.add_argument("--bos-policy", required=True, choices=["auto_prepend", "none"])
    ap.add_argument("--rank-merges", action="store_true")
    ap.add_argument("--out", required=True)
    args = ap.parse_args()

    reader = GGUFReader(args.gguf)
    tokens = strings(reader.fields["tokenizer.ggml.tokens"])
    type_field = reader.fields["tokenizer.ggml.token_type"]
    types = [int(type_field.parts[i][0]) for i in type_field.data]
    bos = reader.fields.get("tokenizer.ggml.bos_token_id")
    bos_id = int(bos.parts[-1][0]) if bos is not None else None

    added = [
        {"id": i, "content": tok, "special": t == CONTROL}
        for i, (tok, t) in enumerate(zip(tokens, types))
        if t in (CONTROL, USER_DEFINED)
    ]

    doc = {
        "format": "fixlab-tokenizer-v1",
        "family": args.family,
        "pretokenizer": args.pretokenizer,
        "normalizer": args.normalizer,
        "tokens": tokens,
        "added_tokens": added,
        "bos_token_id": bos_id,
        "bos_policy": args.bos_policy,
    }
    if not args.rank_merges:
        doc["merges"] = strings(reader.fields["tokenizer.ggml.merges"])

    with gzip.GzipFile(args.out, "wb", mtime=0) as fh:
        fh.write(json.dumps(doc, ensure_ascii=False, separators=(",", ":")).encode("utf-8"))


if __name__ == "__main__":
    main()
