# %% [markdown]
# Split outfits so that no item shows up in two splits.
# Outfits that share items are glued into components; oversized components
# are broken by discarding their busiest items.

# %%
from collections import Counter

from typeaware.data import SyntheticSpec, build_item_graph, disjoint_split, generate_synthetic

dataset, _ = generate_synthetic(SyntheticSpec(n_items=300, n_outfits=400, seed=1))
g = build_item_graph(dataset.outfits)
print(f"{g.number_of_nodes()} items, {g.number_of_edges()} co-occurrence edges")

# %%
split = disjoint_split(dataset, (0.7, 0.1, 0.2), max_discard_fraction=0.5)
print(split.stats)

# %% [markdown]
# Check by brute force: each kept item's outfits all land in one split.

# %%
owners = {}
for o in dataset.outfits:
    label = split.outfits.get(o.outfit_id)
    if label is None:
        continue
    for i in o.items:
        if i not in split.discarded:
            owners.setdefault(i, set()).add(label)
print("items in more than one split:", sum(len(s) > 1 for s in owners.values()))
print("outfits per split:", dict(Counter(split.outfits.values())))
