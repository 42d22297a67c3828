"""LeNet training with the Min-Max conv-weight regularizer, adversarial attacks,
parameter-fuzziness analysis and a Monte Carlo check of the toy-model gradient bound."""

__version__ = "0.1.0"
