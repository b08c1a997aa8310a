"""fairlm: LSTM language modeling with a bias-equalizing loss term and a
gender-bias evaluation suite."""

from importlib import resources

__version__ = "0.1.0"


def default_data_path(name: str):
    """Path to a bundled data file (gender_pairs.txt, occupations.txt, templates.txt)."""
    return resources.files("fairlm").joinpath("data", name)
