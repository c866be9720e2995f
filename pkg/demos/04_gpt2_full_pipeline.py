"""End-to-end GPT-2 small run: calibrate, measure divergences, prune at 25%
with recovery, and evaluate perplexity on WikiText2.

Needs the cached exporter artifacts (several hundred MB; one-time, with hub
access):

    d2p-export model gpt2 artifacts/gpt2-small
    d2p-export corpus wikitext2 test gpt2 artifacts/wikitext2-test.d2ptok

Everything below drives the d2p command line exactly as an operator would.
Expect roughly an hour on CPU, dominated by the two perplexity passes.
"""

import os
import subprocess
import sys

ARTIFACTS = os.environ.get("D2P_ARTIFACTS", os.path.join(os.path.dirname(__file__), "..", "artifacts"))
MODEL = os.path.join(ARTIFACTS, "gpt2-small")
CORPUS = os.path.join(ARTIFACTS, "wikitext2-test.d2ptok")
OUT = os.path.join(ARTIFACTS, "runs")


def run(*args):
    cmd = ["d2p", *map(str, args)]
    print("+ " + " ".join(cmd))
    subprocess.run(cmd, check=True)


def main():
    if not (os.path.isdir(MODEL) and os.path.isfile(CORPUS)):
        print(__doc__)
        print(f"artifacts not found under {os.path.abspath(ARTIFACTS)}; run the "
              "exporter commands above first.")
        return 0
    os.makedirs(OUT, exist_ok=True)

    run("inspect", "--model", MODEL, "--out", f"{OUT}/dense-inspect.json")
    run("calibrate", "--model", MODEL, "--corpus", CORPUS,
        "--samples", 16, "--seq-len", 1024, "--seed", 0, "--out", f"{OUT}/calib")
    run("divergence", "--model", MODEL, "--calib", f"{OUT}/calib",
        "--tau", 0.20, "--out", f"{OUT}/heads.json", "--dot", f"{OUT}/heads.dot")
    run("prune", "--model", MODEL, "--calib", f"{OUT}/calib",
        "--sparsity", 0.25, "--metric", "second-moment", "--tau", 0.20,
        "--recover", "--seed", 0, "--out", f"{OUT}/pruned-25")
    run("eval", "--model", f"{OUT}/pruned-25", "--corpus", CORPUS,
        "--chunk-len", 1024, "--out", f"{OUT}/ppl-pruned.json")
    run("eval", "--model", MODEL, "--corpus", CORPUS,
        "--chunk-len", 1024, "--out", f"{OUT}/ppl-dense.json")
    print(f"\nartifacts in {OUT}: compare ppl-dense.json vs ppl-pruned.json")
    return 0


if __name__ == "__main__":
    sys.exit(main())
