"""
Artifact persistence
Saves and loads quantization dumps, input tensors, engine configs and run manifests
"""

import glob
import json
import os
import sys
from datetime import datetime
from typing import Dict, List, Optional

from accel_sim import EngineConfig
from errors import CalibrationError, ConfigError, FormatError, QuantArtifactError
from logger import get_logger
from quant_engine import QuantModel
from tensor_core import Tensor, load_tensor, save_tensor


class RunManifest:
    """Everything needed to repeat one command"""

    def __init__(self, command: str, model_config: Optional[str], output_dir: str, seed: int,
                 inputs: Optional[str] = None, overrides: Optional[Dict] = None, argv: Optional[List[str]] = None):
        self.command = command
        self.model_config = model_config
        self.output_dir = output_dir
        self.seed = seed
        self.inputs = inputs
        self.overrides = overrides or {}
        self.argv = list(argv if argv is not None else sys.argv[1:])
        self.timestamp = datetime.now().isoformat()

    def to_dict(self) -> Dict:
        return {
            'command': self.command,
            'model_config': self.model_config,
            'inputs': self.inputs,
            'output_dir': self.output_dir,
            'seed': self.seed,
            'overrides': self.overrides,
            'argv': self.argv,
            'timestamp': self.timestamp,
        }


class ArtifactStore:
    """Reads and writes the files of one run directory"""

    def __init__(self, output_dir: str):
        self.output_dir = output_dir

    def path(self, name: str) -> str:
        return os.path.join(self.output_dir, name)

    def save_json(self, name: str, payload: Dict) -> str:
        return get_logger().dump_json(self.path(name), payload)

    def save_manifest(self, manifest: RunManifest) -> str:
        return self.save_json('manifest.json', manifest.to_dict())

    def save_quant(self, qmodel: QuantModel, name: str = 'quant.json') -> str:
        """Write the quantization dump"""
        try:
            return self.save_json(name, qmodel.to_dict())
        except (OSError, TypeError, ValueError) as e:
            get_logger().error(f"Error saving quant dump: {e}")
            raise QuantArtifactError(f"cannot write quant dump: {e}")

    def save_tensors(self, subdir: str, tensors: Dict[str, Tensor]) -> List[str]:
        folder = self.path(subdir)
        os.makedirs(folder, exist_ok=True)
        paths = []
        for name, tensor in sorted(tensors.items()):
            path = os.path.join(folder, f"{name}.tqt")
            save_tensor(path, tensor)
            paths.append(path)
        get_logger().log(f"✅ Saved {len(paths)} tensors to {folder}")
        return paths


def load_quant(path: str) -> QuantModel:
    """Load a quantization dump written by ArtifactStore.save_quant"""
    if not path or not os.path.exists(path):
        raise QuantArtifactError(f"quant dump not found: {path}")
    try:
        with open(path, 'r', encoding='utf-8') as f:
            payload = json.load(f)
    except json.JSONDecodeError as e:
        raise QuantArtifactError(f"malformed quant dump {path}: {e.msg} (line {e.lineno}, column {e.colno})")
    except OSError as e:
        raise QuantArtifactError(f"cannot read quant dump {path}: {e}")
    qmodel = QuantModel.from_dict(payload)
    get_logger().log(f"✅ Quant dump loaded from {path}")
    get_logger().log(f"   Model: {qmodel.model}")
    get_logger().log(f"   Layers: {len(qmodel.layers)}")
    return qmodel


def load_inputs(source: str) -> List[Tensor]:
    """All .tqt tensors of a directory (sorted by name), or a single .tqt file"""
    if os.path.isdir(source):
        paths = sorted(glob.glob(os.path.join(source, '*.tqt')))
    elif os.path.isfile(source):
        paths = [source]
    else:
        raise CalibrationError(f"input source not found: {source}")
    if not paths:
        raise CalibrationError(f"no .tqt tensors in {source}")
    tensors = []
    for path in paths:
        try:
            tensors.append(load_tensor(path))
        except FormatError:
            raise
        except OSError as e:
            raise CalibrationError(f"cannot read {path}: {e}")
    get_logger().log(f"✅ Loaded {len(tensors)} tensors from {source}")
    return tensors


def load_engine_config(path: Optional[str]) -> EngineConfig:
    """Engine config JSON (keys as EngineConfig.to_dict); defaults when path is None"""
    if path is None:
        return EngineConfig()
    try:
        with open(path, 'r', encoding='utf-8') as f:
            payload = json.load(f)
    except OSError as e:
        raise ConfigError(f"cannot read engine config {path}: {e}")
    except json.JSONDecodeError as e:
        raise ConfigError(f"malformed JSON in {path}: {e.msg}", line=e.lineno, column=e.colno)
    if not isinstance(payload, dict):
        raise ConfigError(f"{path}: engine config must be a JSON object")
    return EngineConfig().replace(**payload)


