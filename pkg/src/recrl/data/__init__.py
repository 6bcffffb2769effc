from recrl.data.dataset import (
    DATA_ROOT_ENV, Dataset, InteractionLog, ItemCatalog, load_dataset, read_descriptor, save_dataset,
)
from recrl.data.synthetic import coat_like_dataset, convert_coat, lowrank_dataset

__all__ = [
    "DATA_ROOT_ENV", "Dataset", "InteractionLog", "ItemCatalog", "load_dataset", "read_descriptor",
    "save_dataset", "coat_like_dataset", "convert_coat", "lowrank_dataset",
]
