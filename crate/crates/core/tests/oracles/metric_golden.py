"""Freeze ROUGE-L / CIDEr-D golden values from the COCO caption toolkit.

Run once with pycocoevalcap importable (PYTHONPATH pointing at an unpacked
wheel is enough); writes tests/fixtures/metric_golden.json.
"""
import json
import random
import sys
from pathlib import Path

from pycocoevalcap.cider.cider_scorer import CiderScorer
from pycocoevalcap.rouge.rouge import Rouge

WORDS = (
    "a the man woman he she they door car window opens closes walks runs looks at "
    "to from into smiles turns away towards jack rose sits stands down up slowly "
    "quickly room street night day light dark table chair glass picks drinks"
).split()


def sentence(rng, lo=3, hi=10):
    return " ".join(rng.choice(WORDS) for _ in range(rng.randint(lo, hi)))


def perturb(rng, s):
    toks = s.split()
    out = []
    for t in toks:
        r = rng.random()
        if r < 0.15:
            continue
        if r < 0.35:
            out.append(rng.choice(WORDS))
        else:
            out.append(t)
    if not out:
        out = [rng.choice(WORDS)]
    return " ".join(out)


def main():
    rng = random.Random(20231015)
    fixtures = []
    for f in range(20):
        n_items = rng.randint(2, 6)
        items = []
        for _ in range(n_items):
            refs = [sentence(rng) for _ in range(rng.randint(1, 3))]
            mode = rng.random()
            if mode < 0.2:
                cand = refs[0]
            elif mode < 0.7:
                cand = perturb(rng, rng.choice(refs))
            else:
                cand = sentence(rng)
            items.append({"candidate": cand, "references": refs})
        rouge = Rouge()
        rouge_scores = [rouge.calc_score([it["candidate"]], it["references"]) for it in items]
        scorer = CiderScorer(n=4, sigma=6.0)
        for it in items:
            scorer += (it["candidate"], it["references"])
        mean, per = scorer.compute_score()
        fixtures.append(
            {
                "items": items,
                "rouge_l": rouge_scores,
                "cider": [float(x) for x in per],
                "cider_mean": float(mean),
            }
        )
    out = Path(__file__).resolve().parent.parent / "fixtures" / "metric_golden.json"
    out.write_text(json.dumps({"source": "pycocoevalcap 1.2", "fixtures": fixtures}, indent=1))
    print(f"wrote {len(fixtures)} fixtures to {out}", file=sys.stderr)


if __name__ == "__main__":
    main()
