from typing import List, Optional

import numpy as np

from tdqn.trading_env import Experience


class ReplayMemory:
    """Fixed-capacity experience store with first-in first-out eviction.

    Args:
        capacity (int): Maximum number of experiences kept.
    """

    def __init__(self, capacity: int):
        if capacity < 1:
            raise ValueError(f"capacity must be >= 1, got {capacity}")
        self.capacity = capacity
        self.buffer: List[Optional[Experience]] = [None] * capacity
        self.inserted = 0

    def __len__(self) -> int:
        return min(self.inserted, self.capacity)

    def push(self, experience: Experience) -> None:
        self.buffer[self.inserted % self.capacity] = experience
        self.inserted += 1

    def extend(self, experiences) -> None:
        for experience in experiences:
            self.push(experience)

    def contents(self) -> List[Experience]:
        """Stored experiences, oldest first."""
        if self.inserted <= self.capacity:
            return list(self.buffer[:self.inserted])
        head = self.inserted % self.capacity
        return self.buffer[head:] + self.buffer[:head]

    def slots(self) -> List[Experience]:
        """Stored experiences in slot order, the order `sample` indexes."""
        return list(self.buffer[:len(self)])

    def restore(self, slots: List[Experience], inserted: int) -> None:
        """Refill the memory from `slots` and the insertion counter of an earlier memory.

        Args:
            slots (List[Experience]): Experiences in slot order, as returned by `slots`.
            inserted (int): Number of experiences ever pushed into the earlier memory.
        """
        if len(slots) != min(inserted, self.capacity):
            raise ValueError(f"{len(slots)} slots do not match {inserted} insertions at capacity {self.capacity}")
        self.buffer = list(slots) + [None] * (self.capacity - len(slots))
        self.inserted = inserted

    def sample(self, batch_size: int, rng: np.random.Generator) -> List[Experience]:
        """Draw `batch_size` distinct experiences uniformly.

        Args:
            batch_size (int): Number of experiences.
            rng (np.random.Generator): The random source.

        Returns:
            List[Experience]: The batch.
        """
        if batch_size > len(self):
            raise ValueError(f"cannot sample {batch_size} experiences from {len(self)}")
        picks = rng.choice(len(self), size=batch_size, replace=False)
        return [self.buffer[i] for i in picks]
