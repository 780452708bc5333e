"""Line-delimited JSON evaluator used by the external bridge tests.

The score is the mean allele position normalised to [0, 1]. ``--garbage``
answers with a non-numeric score, ``--slow`` never answers in time and
``--die`` exits on the first request.
"""

import json
import sys
import time


def main(argv):
    mode = argv[1] if len(argv) > 1 else ""
    highs = None
    for line in sys.stdin:
        message = json.loads(line)
        if message["type"] == "hello":
            highs = [len(g["candidates"]) - 1 for g in message["space"]["genes"]]
            continue
        if mode == "--die":
            return 3
        if mode == "--slow":
            time.sleep(30)
        if mode == "--garbage":
            reply = {"score": "high"}
        else:
            reply = {"score": sum(message["alleles"]) / sum(highs)}
        sys.stdout.write(json.dumps(reply) + "\n")
        sys.stdout.flush()
    return 0


if __name__ == "__main__":
    sys.exit(main(sys.argv))
