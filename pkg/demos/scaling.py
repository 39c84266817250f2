"""
Forward time against node count
===============================

Attention through a fixed number of agents should cost time linear in N.
A short sweep, one BLAS thread, median of five runs.
"""

from fast_stg.bench import fit_exponent, run_bench

Ns = [128, 256, 512, 1024]
rows = run_bench(Ns=Ns, horizons=[48], agents=[16], threads=1, T=48, d=32, e=4, L=2, reps=5, train_step=False)
for r in rows:
    share = r.stage_ms["attention"] / sum(r.stage_ms.values())
    print(f"N={r.N:5d}  forward {r.forward_ms:7.2f} ms  attention share {share:.2f}  "
          f"largest intermediate {r.peak_intermediate_elements}")
print("fitted exponent, time:", round(fit_exponent(Ns, [r.forward_ms for r in rows]), 3))
print("fitted exponent, elements:", round(fit_exponent(Ns, [r.peak_intermediate_elements for r in rows]), 3))
