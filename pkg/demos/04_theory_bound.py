"""
Merging gap bounds on least-squares tasks
=========================================

Tasks are fine-tuned by gradient descent from a shared start. The loss gap
between the merged and the individual model is compared with a first-order
bound and with the bound in terms of step size and number of steps.
"""

import numpy as np

from taskmerge.theory import TheoryConfig, run_bound_grid, steps_sweep

cfg = TheoryConfig(n_cells=6)
for cell in run_bound_grid(cfg):
    r = cell.report
    print(f"eta {r.eta:.2e} T {r.T:4d}  max gap {r.gaps.max():.3e}"
          f"  lemma {r.lemma_bound.max():.3e}  theorem {r.theorem_bound.max():.3e}  pass {r.passed}")

# more fine-tuning first helps the merged model, then interference wins
rows = steps_sweep(TheoryConfig())
lam = rows[0][1]
curve = [(T, loss) for T, l, loss in rows if l == lam]
for T, loss in curve:
    print(f"T {T:4d}  mean loss {loss:10.3f}")
print("best T:", curve[int(np.argmin([c[1] for c in curve]))][0])
