"""Sample quality proxy: accuracy of a fixed classifier trained on real data."""
import numpy as np
from sklearn.linear_model import LogisticRegression
from sklearn.pipeline import make_pipeline
from sklearn.preprocessing import StandardScaler

from .data import ImageDataset


def _features(images, pool: int) -> np.ndarray:
    x = np.clip(np.asarray(images, dtype=np.float64), -1, 1)
    B, H, W, C = x.shape
    x = x.reshape(B, H // pool, pool, W // pool, pool, C).mean(axis=(2, 4))
    return x.reshape(B, -1)


class ToyClassifier:
    """Logistic regression on average-pooled pixels."""

    def __init__(self, pool: int = 2, C: float = 0.1, seed: int = 0):
        self.pool = pool
        self.model = make_pipeline(StandardScaler(),
                                   LogisticRegression(C=C, max_iter=2000, random_state=seed))

    def fit(self, dataset: ImageDataset) -> "ToyClassifier":
        self.model.fit(_features(dataset.images, self.pool), dataset.labels)
        return self

    def predict(self, images) -> np.ndarray:
        return self.model.predict(_features(images, self.pool))

    def accuracy(self, images, labels) -> float:
        return float(np.mean(self.predict(images) == np.asarray(labels)))
