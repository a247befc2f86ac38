# %% [markdown]
# Train a small model and run the retrieval queries against it.

# %%
from typeaware.data import SyntheticSpec, generate_synthetic
from typeaware.model import EmbeddingModel, Hyperparams
from typeaware.query import compatible_diverse, interchangeable, recursive_swap, replace_item
from typeaware.trainer import TrainConfig, fit

dataset, _ = generate_synthetic(SyntheticSpec(n_items=400, n_outfits=300, seed=4))
hyper = Hyperparams(hidden=(), text_hidden=(), learning_rate=5e-3)
model = EmbeddingModel(fit(dataset, TrainConfig(hyper, epochs=5)).params, dataset.items)

# %% [markdown]
# Compatible but mutually different items of another type.

# %%
outfit = dataset.outfits[0]
anchor = outfit.items[0]
target = dataset.type_of(outfit.items[1])
print(compatible_diverse(model, anchor, target, n=4).to_text())

# %% [markdown]
# Nearest same-type neighbours in the general space.

# %%
print(interchangeable(model, anchor, n=4).to_text())

# %% [markdown]
# Swap one item for something far from it without losing much compatibility.

# %%
print(replace_item(model, outfit, anchor, n=3).to_text())

# %%
for step in recursive_swap(model, outfit, seed=0):
    print(step.held, "->", step.replacement, f"{step.score:.3f} (gate {step.threshold:.3f})")
