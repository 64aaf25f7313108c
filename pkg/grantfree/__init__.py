from grantfree.config import BigampConfig, DampingConfig, ExperimentSpec, SystemConfig, load_experiment_spec
from grantfree.utils import DegenerateInputError, DivergenceError, set_logging_format
