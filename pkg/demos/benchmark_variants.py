# %% [markdown]
# Compare the four model variants on seeded synthetic outfits.
# Each seed plants a type-pair-specific compatibility rule, so a single
# shared space should struggle and pair-specific masks should not.

# %%
import sys

from typeaware.benchmark import DATA, EPOCHS, run_benchmark

seeds = tuple(int(s) for s in sys.argv[1:]) or (0,)
print(f"{DATA.n_items} items, {DATA.n_outfits} outfits, {EPOCHS} epochs, seeds {seeds}")

# %%
result = run_benchmark(seeds=seeds)
print(result.to_text())

# %% [markdown]
# The generator's own scoring rule is an upper bound on what any model can reach.

# %%
for seed, (fitb, auc) in result.oracle.items():
    print(f"oracle seed {seed}: fitb {fitb:.3f} auc {auc:.3f}")
print(f"total {result.seconds:.0f}s")
