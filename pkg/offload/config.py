"""
Run configuration: JSON files validated by the forms in forms.py and frozen into dataclasses.

dBm / dB entries are converted to linear SI units here and nowhere else.
"""
import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

from django.conf import settings
from django.core.exceptions import ValidationError

from .ecld import ToyNetSpec, VariantProfile, load_catalog
from .forms import (
    CompressConfigForm, MluForm, PpoConfigForm, QosForm, RunConfigForm, SystemConfigForm, WmConfigForm,
)

logger = logging.getLogger(__name__)


def dbm_to_watts(dbm):
    return 10.0 ** ((dbm - 30.0) / 10.0)


def db_to_linear(db):
    return 10.0 ** (db / 10.0)


def config_hash(data):
    canonical = json.dumps(data, sort_keys=True, separators=(',', ':'))
    return hashlib.sha256(canonical.encode('utf-8')).hexdigest()[:16]


def default_catalog_path():
    return Path(settings.EDGEFLOCK['PROFILE_CATALOG'])


@dataclass(frozen=True)
class MluConfig:
    cpu_freq_hz: float = 2e9
    p_max_w: float = dbm_to_watts(33.0)
    e_max_j: float = 2.0
    position: tuple = None


@dataclass(frozen=True)
class QosConfig:
    local: VariantProfile
    edge: VariantProfile
    a_min: float = 0.6
    h_max: float = 0.78
    penalty_weight: float = 10.0
    mec_accuracy: float = 1.0
    mec_hallucination: float = None
    concentration: float = 50.0

    @property
    def edge_hallucination(self):
        if self.mec_hallucination is not None:
            return self.mec_hallucination
        return self.edge.offline_hallucination


@dataclass(frozen=True)
class SystemConfig:
    mlus: tuple
    qos: QosConfig
    slots: int = 100
    bandwidth_hz: float = 1e7
    noise_power_w: float = dbm_to_watts(-104.0)
    rician_k: float = 8.0
    ref_gain: float = db_to_linear(-30.0)
    mec_height_m: float = 10.0
    mec_freq_hz: float = 1e10
    cycles_per_bit: float = 900.0
    cycles_per_bit_mec: float = None
    energy_coeff: float = 1e-28
    task_size_bits: tuple = (1.0e6, 2.5e6)
    cell_radius_m: float = 20.0
    slot_cap_s: float = 10.0
    latency_scale_s: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if not self.mlus:
            raise ValueError('at least one MLU is required')
        if self.slots < 1:
            raise ValueError('episodes need at least one slot')

    @property
    def num_mlus(self):
        return len(self.mlus)

    @property
    def phi_mec(self):
        return self.cycles_per_bit if self.cycles_per_bit_mec is None else self.cycles_per_bit_mec

    @property
    def los_only(self):
        return self.rician_k is None or math.isinf(self.rician_k)

    def with_mlus(self, count):
        """Same system with `count` MLUs (extra MLUs copy the last one, positions dropped)."""
        template = replace(self.mlus[-1], position=None)
        mlus = tuple(self.mlus[:count]) + (template,) * max(0, count - len(self.mlus))
        return replace(self, mlus=mlus)


@dataclass(frozen=True)
class PpoConfig:
    clip_eps: float = 0.1
    gamma: float = 0.99
    epochs: int = 10
    entropy_coef: float = 0.001
    gae_lambda: float = 0.95
    minibatch_size: int = 64
    actor_lr: float = 1e-5
    critic_lr: float = 1e-5
    hidden: tuple = (256, 256)
    normalize_advantages: bool = True
    max_grad_norm: float = None
    init_log_std: float = -0.5


@dataclass(frozen=True)
class WmConfig:
    n_h: int = 256
    n_z: int = 32
    hidden: tuple = (256, 256)
    lambda_r: float = 1.0
    beta_kl: float = 1.0
    lambda_d: float = 0.1
    lambda_wm: float = 0.5
    horizon: int = 3
    eta: float = 0.3
    lr: float = 1e-3
    seq_len: int = 16
    batch_size: int = 16
    updates_per_iteration: int = 10
    replay_episodes: int = 32
    select_fraction: float = 0.25
    max_grad_norm: float = 100.0


@dataclass(frozen=True)
class RunConfig:
    system: SystemConfig
    ppo: PpoConfig = field(default_factory=PpoConfig)
    world_model: WmConfig = field(default_factory=WmConfig)
    algorithm: str = 'wm-ppo'
    iterations: int = 300
    seeds: tuple = (0,)
    checkpoint_interval: int = 50
    eval_episodes: int = 100
    trace_episodes: int = 1
    parallel_envs: int = 1
    k_values: tuple = (2, 3)
    task_size_sweep_mbit: tuple = ()
    raw: dict = field(default_factory=dict, compare=False)

    @property
    def episode_length(self):
        return self.system.slots

    @property
    def hash(self):
        return config_hash(self.raw)


@dataclass(frozen=True)
class CompressConfig:
    net: ToyNetSpec = field(default_factory=ToyNetSpec)
    seed: int = 0
    teacher_scale: float = 2.0
    n_calibration: int = 64
    n_train: int = 512
    n_test: int = 512
    theta: float = None
    theta_depth: float = None
    theta_quantile: float = 0.3
    distill_alpha: float = 0.5
    distill_tau: float = 2.0
    distill_steps: int = 300
    distill_lr: float = 1e-2
    bit_width: int = None
    target: str = 'smartphone'
    grid: int = 32
    base_profile: VariantProfile = None
    variant_name: str = 'toy/ecld'
    accuracy_corpus: str = ''
    hallucination_corpus: str = ''
    raw: dict = field(default_factory=dict, compare=False)

    @property
    def hash(self):
        return config_hash(self.raw)


def read_json(path):
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ValidationError(f'{path}: invalid JSON ({exc.msg} at line {exc.lineno})')
    if not isinstance(data, dict):
        raise ValidationError(f'{path}: top level must be a JSON object, got {type(data).__name__}')
    return data


def resolve_profile(name, inline, catalog_path):
    if inline:
        if not isinstance(inline, dict):
            raise ValidationError('inline profiles must be JSON objects')
        try:
            return VariantProfile(name=inline.get('name', name or 'inline'), **{k: v for k, v in inline.items() if k != 'name'})
        except (TypeError, ValueError) as exc:
            raise ValidationError(f'invalid inline profile: {exc}')
    catalog = load_catalog(catalog_path)
    if name not in catalog:
        raise ValidationError(f'variant {name!r} is not in {catalog_path}')
    return catalog[name]


def build_qos(raw, base_dir=None):
    data = QosForm.clean_section(raw, 'system.qos')
    catalog_path = Path(data['catalog']) if data['catalog'] else default_catalog_path()
    if base_dir is not None and not catalog_path.is_absolute() and data['catalog']:
        catalog_path = Path(base_dir) / catalog_path
    return QosConfig(
        local=resolve_profile(data['local_variant'], data['local_profile'], catalog_path),
        edge=resolve_profile(data['edge_variant'], data['edge_profile'], catalog_path),
        a_min=data['a_min'],
        h_max=data['h_max'],
        penalty_weight=data['penalty_weight'],
        mec_accuracy=data['mec_accuracy'],
        mec_hallucination=data['mec_hallucination'],
        concentration=data['concentration'],
    )


def build_mlu(raw, defaults, section):
    merged = dict(defaults or {})
    merged.update(raw or {})
    data = MluForm.clean_section(merged, section)
    return MluConfig(
        cpu_freq_hz=data['cpu_freq_hz'],
        p_max_w=dbm_to_watts(data['p_max_dbm']),
        e_max_j=data['e_max_j'],
        position=tuple(data['position']) if data['position'] else None,
    )


def build_system(raw, base_dir=None):
    data = SystemConfigForm.clean_section(raw, 'system')
    overrides = data['mlus']
    if len(overrides) > data['num_mlus']:
        raise ValidationError('system.mlus lists more MLUs than num_mlus')
    mlus = tuple(
        build_mlu(overrides[k] if k < len(overrides) else {}, data['mlu_defaults'], f'system.mlus[{k}]')
        for k in range(data['num_mlus'])
    )
    low, high = data['task_size_mbit']
    return SystemConfig(
        mlus=mlus,
        qos=build_qos(data['qos'], base_dir),
        slots=data['slots'],
        bandwidth_hz=data['bandwidth_hz'],
        noise_power_w=dbm_to_watts(data['noise_power_dbm']),
        rician_k=data['rician_k'] if data['rician_k'] is not None else math.inf,
        ref_gain=db_to_linear(data['ref_gain_db']),
        mec_height_m=data['mec_height_m'],
        mec_freq_hz=data['mec_freq_hz'],
        cycles_per_bit=data['cycles_per_bit'],
        cycles_per_bit_mec=data['cycles_per_bit_mec'],
        energy_coeff=data['energy_coeff'],
        task_size_bits=(low * 1e6, high * 1e6),
        cell_radius_m=data['cell_radius_m'],
        slot_cap_s=data['slot_cap_s'],
        latency_scale_s=data['latency_scale_s'],
        seed=data['seed'] or 0,
    )


def build_ppo(raw):
    data = PpoConfigForm.clean_section(raw, 'ppo')
    data['hidden'] = tuple(data['hidden'])
    return PpoConfig(**data)


def build_world_model(raw):
    data = WmConfigForm.clean_section(raw, 'world_model')
    data['hidden'] = tuple(data['hidden'])
    return WmConfig(**data)


def build_run_config(raw, base_dir=None, seed=None, iterations=None, algorithm=None):
    """Validate a parsed run config; command-line overrides are folded into the hashed payload."""
    raw = dict(raw)
    if seed is not None:
        raw['seeds'] = [int(seed)]
    if iterations is not None:
        raw['iterations'] = int(iterations)
    if algorithm is not None:
        raw['algorithm'] = algorithm
    data = RunConfigForm.clean_section(raw, 'run')
    return RunConfig(
        system=build_system(data['system'], base_dir),
        ppo=build_ppo(data['ppo']),
        world_model=build_world_model(data['world_model']),
        algorithm=data['algorithm'],
        iterations=data['iterations'],
        seeds=tuple(data['seeds']),
        checkpoint_interval=data['checkpoint_interval'],
        eval_episodes=data['eval_episodes'],
        trace_episodes=data['trace_episodes'],
        parallel_envs=data['parallel_envs'],
        k_values=tuple(data['k_values']),
        task_size_sweep_mbit=tuple(data['task_size_sweep_mbit']),
        raw=raw,
    )


def load_run_config(path, **overrides):
    path = Path(path)
    if not path.exists():
        raise ValidationError(f'config file {path} does not exist')
    return build_run_config(read_json(path), base_dir=path.parent, **overrides)


def build_compress_config(raw, base_dir=None, seed=None):
    raw = dict(raw)
    if seed is not None:
        raw['seed'] = int(seed)
    data = CompressConfigForm.clean_section(raw, 'compress')
    catalog_path = Path(data['catalog']) if data['catalog'] else default_catalog_path()

    def local_path(value):
        if value and base_dir is not None and not Path(value).is_absolute():
            return str(Path(base_dir) / value)
        return value

    if data['catalog']:
        catalog_path = Path(local_path(data['catalog']))
    net = ToyNetSpec(
        n_in=data['n_in'], n_embed=data['n_embed'], n_layers=data['n_layers'],
        n_heads=data['n_heads'], head_size=data['head_size'], n_classes=data['n_classes'],
    )
    return CompressConfig(
        net=net,
        seed=data['seed'],
        teacher_scale=data['teacher_scale'],
        n_calibration=data['n_calibration'],
        n_train=data['n_train'],
        n_test=data['n_test'],
        theta=data['theta'],
        theta_depth=data['theta_depth'],
        theta_quantile=data['theta_quantile'],
        distill_alpha=data['distill_alpha'],
        distill_tau=data['distill_tau'],
        distill_steps=data['distill_steps'],
        distill_lr=data['distill_lr'],
        bit_width=data['bit_width'],
        target=data['target'],
        grid=data['grid'],
        base_profile=resolve_profile(data['base_variant'], None, catalog_path),
        variant_name=data['variant_name'],
        accuracy_corpus=local_path(data['accuracy_corpus']),
        hallucination_corpus=local_path(data['hallucination_corpus']),
        raw=raw,
    )


def load_compress_config(path, **overrides):
    path = Path(path)
    if not path.exists():
        raise ValidationError(f'config file {path} does not exist')
    return build_compress_config(read_json(path), base_dir=path.parent, **overrides)


def describe(config):
    """JSON-safe echo of a resolved config dataclass."""
    def convert(value):
        if isinstance(value, float) and math.isinf(value):
            return None
        if isinstance(value, dict):
            return {k: convert(v) for k, v in value.items() if k != 'raw'}
        if isinstance(value, (list, tuple)):
            return [convert(v) for v in value]
        return value
    return convert(asdict(config))
