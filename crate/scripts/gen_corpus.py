#!/usr/bin/env python3
"""Regenerate fixtures/corpus.txt: 2,000 short synthetic documents, one per line."""
import random
import sys

SUBJECTS = ["the river", "a small lamp", "the old engineer", "every student", "the quiet market",
            "a red fox", "the committee", "our neighbour", "the last train", "a young painter",
            "the city council", "the night shift", "a careful reader", "the weather station",
            "the harbour crew", "a stray cat", "the library", "the garden", "my cousin", "the orchestra"]
VERBS = ["watched", "repaired", "described", "carried", "ignored", "measured", "followed",
         "painted", "questioned", "opened", "counted", "remembered", "built", "sold", "found"]
OBJECTS = ["the broken gate", "a letter from home", "the morning fog", "three copper coins",
           "the long report", "a map of the coast", "the winter harvest", "an empty box",
           "the northern road", "a quiet song", "the signal lights", "two paper boats",
           "the evening news", "a pair of boots", "the tall clock"]
TAILS = ["before noon", "without a word", "near the bridge", "after the storm", "once again",
         "in the rain", "for the first time", "with great care", "at the station", "by candlelight",
         "", "", ""]
LINKS = [" and then", ", while", ", because", " so", ", but"]


def clause(rng):
    tail = rng.choice(TAILS)
    parts = [rng.choice(SUBJECTS), rng.choice(VERBS), rng.choice(OBJECTS)]
    if tail:
        parts.append(tail)
    return " ".join(parts)


def document(rng):
    out = []
    while sum(len(s) for s in out) < rng.randint(40, 90):
        s = clause(rng)
        if rng.random() < 0.4:
            s += rng.choice(LINKS) + " " + clause(rng)
        out.append(s[0].upper() + s[1:] + ".")
    return " ".join(out)


def main():
    rng = random.Random(20240601)
    path = sys.argv[1] if len(sys.argv) > 1 else "fixtures/corpus.txt"
    with open(path, "w") as f:
        for _ in range(2000):
            f.write(document(rng) + "\n")


if __name__ == "__main__":
    main()
