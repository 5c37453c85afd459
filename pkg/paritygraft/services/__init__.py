__all__ = ("tensors", "pixelmath", "backdoor", "model", "stdsearch", "stealth_metrics", "defense_sims")
