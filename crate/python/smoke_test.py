"""Smoke test for the pycsicount extension.

Build and install first, e.g.

    pip install maturin
    pip install --no-build-isolation ./crates/python

or build with cargo and put the shared library on PYTHONPATH as
pycsicount.so. Then run: python python/smoke_test.py
"""

import math
import os
import sys
import tempfile

import pycsicount as cc


def check(name, cond, detail=""):
    print(f"{'ok  ' if cond else 'FAIL'} {name} {detail}".rstrip())
    if not cond:
        sys.exit(1)


def main():
    cap = cc.simulate_count(2, duration=0.5, seed=3)
    check("simulate", len(cap) == 750 and cap.shape == (2, 3, 30), repr(cap))

    with tempfile.TemporaryDirectory() as d:
        path = os.path.join(d, "c.csic")
        cap.write(path)
        back = cc.Capture.read(path)
        check("round trip", back.amplitude() == cap.amplitude() and back.timestamps() == cap.timestamps())

    distorted = cap.inject_phase_offsets(sfo=0.2, cfo=1.0)
    clean = cc.sanitize_phase(distorted.phase(), 6, 30)
    row = clean[0]
    mean = [sum(row[i * 30 + j] for i in range(6)) / 6 for j in range(30)]
    slope = abs(cc.fitted_slope(mean))
    check("sanitize", slope < 1e-9, f"slope={slope:.1e}")

    signal = [math.sin(0.01 * t * t) for t in range(1024)]
    rebuilt = cc.dwt_round_trip(signal, 10)
    err = max(abs(a - b) for a, b in zip(signal, rebuilt))
    details, approx = cc.dwt(signal, 10)
    check("dwt", err < 1e-9 and len(details) == 10 and len(approx) == 1, f"err={err:.1e}")

    models = {}
    for activity in ("Walking", "Falling"):
        seqs = [cc.activity_features(cc.simulate_activity(activity, duration=1.024, seed=s)) for s in range(6)]
        models[activity] = cc.GaussianHmm.fit(seqs, n_states=3, seed=1)
    obs = cc.activity_features(cc.simulate_activity("Falling", duration=1.024, seed=99))
    label = cc.classify(models, obs)
    check("hmm", label == "Falling" and len(models["Walking"].viterbi(obs)) == len(obs), label)

    net = cc.Network.deepcount()
    trace = net.shape_trace()
    check("shape trace", trace == [[200, 64], [98, 30, 6], [32, 10, 10], [3200], [1000], [200], [5]])
    check("param count", net.param_count == 3512071)

    err = cc.Network.toy(seed=2).gradcheck(eps=1e-5, batch=2)
    check("gradcheck", err < 1e-4, f"max_rel_err={err:.2e}")

    counts = cc.Network.fcbp().predict(cc.simulate_count(3, duration=0.4, seed=1))
    check("predict", len(counts) == 3 and all(1 <= c <= 5 for c in counts), str(counts))

    try:
        cc.simulate_activity("Dancing")
    except ValueError:
        check("errors", True)
    else:
        check("errors", False, "unknown activity accepted")


if __name__ == "__main__":
    main()
