"""Exception types raised across modepinn."""


class ModePinnError(Exception):
    pass


class ConfigError(ModePinnError, ValueError):
    pass


class DimensionError(ModePinnError, ValueError):
    pass


class MetricError(ModePinnError, ValueError):
    pass


class AutodiffError(ModePinnError, RuntimeError):
    pass


class SvdConvergenceError(ModePinnError, RuntimeError):
    def __init__(self, iterations: int, off_diagonal: float):
        super().__init__(
            "Jacobi SVD did not converge after {} sweeps (largest off-diagonal cosine {:.3e})".format(
                iterations, off_diagonal
            )
        )
        self.iterations = iterations
        self.off_diagonal = off_diagonal


class NonFiniteError(ModePinnError, FloatingPointError):
    def __init__(self, layer_index: int, where: str = "network"):
        super().__init__(
            "Non-finite value produced by {} layer {}".format(where, layer_index)
        )
        self.layer_index = layer_index
        self.where = where


class StabilityError(ModePinnError, ValueError):
    def __init__(self, ratio: float, limit: float):
        super().__init__(
            "Explicit diffusion step is unstable: nu*dt/dx^2 = {:.6g} exceeds {}".format(
                ratio, limit
            )
        )
        self.ratio = ratio
        self.limit = limit


class ConvergenceOrderError(ModePinnError, RuntimeError):
    pass


class TrainingDivergenceError(ModePinnError, RuntimeError):
    def __init__(self, iteration: int, total: float):
        super().__init__(
            "Training diverged at iteration {} (total loss {})".format(iteration, total)
        )
        self.iteration = iteration
        self.total = total


class NonFiniteGradientError(ModePinnError, FloatingPointError):
    def __init__(self, name: str):
        super().__init__("Non-finite gradient for parameter {}".format(name))
        self.name = name
