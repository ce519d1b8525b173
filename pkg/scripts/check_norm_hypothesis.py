"""
Desk check: operator norm and restricted norm of sampled couplings across sizes
"""
import sys
import os

# Add the parent directory to the path so we can import the app package
sys.path.insert(0, os.path.abspath(os.path.join(os.path.dirname(__file__), '..')))

from app.models.lab_models import DisorderLaw, DisorderSpec
from app.services.bounds import restricted_norm
from app.services.disorder import operator_norm, sample_coupling


def check_norms(sizes=(100, 200, 400, 800), seeds=3, rho=0.05):
    """Print ||A||_op (expected near 2 sqrt 2) and the fitted restricted-norm constant"""
    for law in (DisorderLaw.GAUSSIAN, DisorderLaw.RADEMACHER):
        print(f"\n📐 {law.value}")
        for n in sizes:
            for seed in range(seeds):
                A = sample_coupling(DisorderSpec(law=law, n=n, master_seed=seed))
                norm = operator_norm(A)
                report = restricted_norm(A, rho, mode="heuristic", budget=10_000, seed=seed)
                mark = "✅" if norm <= 3.0 else "❌"
                print(f"   {mark} N={n:<5} seed={seed}  ||A||={norm:.4f}  "
                      f"|I|={len(report.subset):<3} fitted C={report.fitted_constant:.3f}")


if __name__ == "__main__":
    check_norms()
