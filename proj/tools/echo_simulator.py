#!/usr/bin/env python3
"""Reference external simulator: summary = theta + N(0, 1) noise seeded per request.

Speaks the line-JSON protocol on stdin/stdout. Dimension from argv[1] (default 2).
"""
import json
import random
import sys

dim = int(sys.argv[1]) if len(sys.argv) > 1 else 2
print(json.dumps({"protocol": 1, "dim_theta": dim, "dim_summary": dim}), flush=True)
for line in sys.stdin:
    req = json.loads(line)
    rng = random.Random(req["seed"])
    summary = [t + rng.gauss(0.0, 1.0) for t in req["theta"]]
    print(json.dumps({"id": req["id"], "summary": summary}), flush=True)
