#!/usr/bin/env python3
"""Generate the bundled toy corpus under data/toy/.

Dialogues are built from small topic word banks: a context sticks to one
topic, the true response shares it, negatives come from other topics.  The
structure is deliberately learnable by a small model in a couple of minutes
so the end-to-end pipeline can be demonstrated offline.

Deterministic for a fixed seed; run from the repository root:

    python3 scripts/make_toy_corpus.py
"""

import argparse
import json
from pathlib import Path

import numpy as np

TOPICS = {
    "boot": ["kernel", "grub", "bios", "restart", "firmware"],
    "net": ["wifi", "router", "dns", "ethernet", "ping"],
    "disk": ["partition", "mount", "filesystem", "backup", "sector"],
    "audio": ["volume", "driver", "speaker", "mixer", "mute"],
    "shell": ["bash", "alias", "script", "prompt", "cron"],
    "gui": ["window", "theme", "icon", "desktop", "cursor"],
}
FILLERS = ["the", "my", "is", "not", "try", "again", "please", "help", "it", "now"]


def sentence(topic, rng, words=4):
    bank = TOPICS[topic]
    picked = []
    for _ in range(words):
        if rng.random() < 0.7:
            picked.append(bank[int(rng.integers(len(bank)))])
        else:
            picked.append(FILLERS[int(rng.integers(len(FILLERS)))])
    return " ".join(picked)


def other_topic(topic, rng):
    names = list(TOPICS)
    return names[(names.index(topic) + 1 + int(rng.integers(len(names) - 1))) % len(names)]


def write_tsv(path, rng, count):
    names = list(TOPICS)
    with open(path, "w", encoding="utf-8") as fh:
        for i in range(count):
            topic = names[int(rng.integers(len(names)))]
            n_context = int(rng.integers(2, 5))
            utterances = [sentence(topic, rng) for _ in range(n_context)]
            label = i % 2
            response = sentence(topic if label else other_topic(topic, rng), rng)
            fh.write("%d\t%s\t%s\n" % (label, "\t".join(utterances), response))


def write_pools(path, rng, count, pool_size=10):
    names = list(TOPICS)
    with open(path, "w", encoding="utf-8") as fh:
        for _ in range(count):
            topic = names[int(rng.integers(len(names)))]
            n_context = int(rng.integers(2, 5))
            records = []
            for j in range(n_context):
                records.append({
                    "index": j,
                    "from": "spk_A" if j % 2 == 0 else "spk_B",
                    "to": None,
                    "text": sentence(topic, rng),
                })
            responder = "spk_A" if n_context % 2 == 0 else "spk_B"
            # reference response first, distractors after (the usual pool layout,
            # which is what makes the first-2-candidates R_2@1 view meaningful)
            candidates = [{"text": sentence(topic, rng), "from": responder, "label": 1}]
            for _ in range(pool_size - 1):
                candidates.append({
                    "text": sentence(other_topic(topic, rng), rng),
                    "from": responder,
                    "label": 0,
                })
            records[-1]["candidates"] = candidates
            for record in records:
                fh.write(json.dumps(record) + "\n")


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--out-dir", default="data/toy")
    parser.add_argument("--seed", type=int, default=20240501)
    parser.add_argument("--train-size", type=int, default=160)
    parser.add_argument("--pool-count", type=int, default=16)
    args = parser.parse_args()

    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(args.seed)
    write_tsv(out / "train.tsv", rng, args.train_size)
    write_tsv(out / "valid.tsv", rng, max(20, args.train_size // 4))
    write_pools(out / "valid_pools.jsonl", rng, args.pool_count)
    write_pools(out / "test_pools.jsonl", rng, args.pool_count)
    print("wrote toy corpus to %s" % out)


if __name__ == "__main__":
    main()
