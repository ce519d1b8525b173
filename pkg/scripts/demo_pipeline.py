"""
Demo: run the bottleneck pipeline on one instance at several temperatures
and compare the predicted lower bound with escape times from the same state
"""
import sys
import os

# Add the parent directory to the path so we can import the app package
sys.path.insert(0, os.path.abspath(os.path.join(os.path.dirname(__file__), '..')))

import math

from app.models.lab_models import DisorderSpec
from app.services.bounds import theorem_pipeline
from app.services.disorder import sample_coupling
from app.services.dynamics import escape_time
from app.services.gapped import enumerate_local_maxima


def demo(n=14, seed=1, rho=0.25, gamma=0.3, delta=0.2):
    A = sample_coupling(DisorderSpec(n=n, master_seed=seed))
    maxima = enumerate_local_maxima(A)
    reference = maxima.deepest()
    print(f"🧊 N={n}: {len(maxima.maxima)} local maxima, deepest {reference.to_hex()}, maximin {maxima.maximin():.4f}")

    for beta in (0.5, 1.0, 2.0, 3.0):
        result = theorem_pipeline(A, beta, gamma, delta, rho, reference=reference, seed=seed)
        stats = escape_time(A, reference, beta, rho, reps=50, cap=10**6, seed=seed, n_jobs=4)
        median = stats.median_lower_bound()
        print(f"\n{'='*60}")
        print(result.summary())
        print(f"⏱️  escape median {median:.4g} (log {math.log(median):.3f}), censored {stats.censored_count}/50")


if __name__ == "__main__":
    demo()
