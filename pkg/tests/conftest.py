import torch

torch.set_num_threads(1)  # fixed reduction order, reproducible runs
