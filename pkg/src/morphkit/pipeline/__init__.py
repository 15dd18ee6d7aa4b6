from .commands import (PipelineError, RunContext, cmd_evaluate, cmd_generate, cmd_prepare, cmd_synth,
                       cmd_train_blender, cmd_train_landmarks)
from .config import ConfigError, RunConfig, config_hash, dump_config, load_config, save_config
from .protocol import MorphPair, ProtocolError, read_protocol, write_protocol
from .synth import generate_synthetic_dataset
