"""Regenerate the corpus fixtures: ``python3 tests/fixtures/make_fixtures.py``."""
import json
import os
import sys

HERE = os.path.dirname(os.path.abspath(__file__))
sys.path.insert(0, os.path.dirname(HERE))

import synth  # noqa: E402


def dump(name, rows):
    with open(os.path.join(HERE, name), "w", encoding="utf-8") as fh:
        for r in rows:
            fh.write(json.dumps(r, sort_keys=True) + "\n")


def main():
    threads, articles = synth.political_world(50, 200, seed=0)
    dump("threads.jsonl", threads)
    dump("articles.jsonl", articles)
    dump("articles_100.jsonl", articles[:100])


if __name__ == "__main__":
    main()
