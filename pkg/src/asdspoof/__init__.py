"""Adversarial speaker distillation for ASV anti-spoofing."""
