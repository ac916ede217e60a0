"""Lightweight op counters used to verify the adaptation cost contract."""

from dataclasses import dataclass


@dataclass
class OpCounters:
    """Counts of work done since the last reset.

    inference_examples: examples pushed through a forward pass with gradient
        recording disabled.
    gradient_examples: examples pushed through a forward pass while recording.
    backward_calls: number of reverse-mode sweeps.
    """

    inference_examples: int = 0
    gradient_examples: int = 0
    backward_calls: int = 0

    def reset(self) -> None:
        self.inference_examples = 0
        self.gradient_examples = 0
        self.backward_calls = 0

    def snapshot(self) -> "OpCounters":
        return OpCounters(
            self.inference_examples, self.gradient_examples, self.backward_calls
        )


COUNTERS = OpCounters()
