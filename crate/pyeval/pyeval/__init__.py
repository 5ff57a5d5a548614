from .worker import Evaluator, load_dataset

__all__ = ["Evaluator", "load_dataset"]
