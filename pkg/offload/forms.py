import math

from django import forms
from django.core.exceptions import ValidationError


def validate_positive(value):
    if value is not None and not value > 0:
        raise ValidationError('Ensure this value is greater than 0.', code='positive')


def validate_unit_interval(value):
    if value is not None and not 0.0 <= value <= 1.0:
        raise ValidationError('Ensure this value lies in [0, 1].', code='unit_interval')


class NumberListField(forms.Field):
    """A JSON list of numbers (Django core forms have no list field)."""
    default_error_messages = {
        'invalid': 'Enter a list of numbers.',
        'length': 'Expected between %(min)s and %(max)s items, got %(count)s.',
        'min_value': 'Every item must be >= %(limit)s.',
        'finite': 'Every item must be finite.',
    }

    def __init__(self, *, number=float, min_length=0, max_length=None, min_value=None, **kwargs):
        self.number = number
        self.min_length = min_length
        self.max_length = max_length
        self.min_value = min_value
        super().__init__(**kwargs)

    def to_python(self, value):
        if value in self.empty_values:
            return []
        if not isinstance(value, (list, tuple)):
            raise ValidationError(self.error_messages['invalid'], code='invalid')
        try:
            return [self.number(item) for item in value]
        except (TypeError, ValueError):
            raise ValidationError(self.error_messages['invalid'], code='invalid')

    def validate(self, value):
        super().validate(value)
        if not value and not self.required:
            return
        count = len(value)
        if count < self.min_length or (self.max_length is not None and count > self.max_length):
            raise ValidationError(
                self.error_messages['length'], code='length',
                params={'min': self.min_length, 'max': self.max_length or 'any', 'count': count},
            )
        if any(not math.isfinite(item) for item in value):
            raise ValidationError(self.error_messages['finite'], code='finite')
        if self.min_value is not None and any(item < self.min_value for item in value):
            raise ValidationError(self.error_messages['min_value'], code='min_value', params={'limit': self.min_value})


class ConfigForm(forms.Form):
    """Validates one section of a JSON config; keys left out fall back to the field initials."""

    @classmethod
    def clean_section(cls, raw, section):
        raw = {} if raw is None else raw
        if not isinstance(raw, dict):
            raise ValidationError(f'{section} must be a JSON object')
        unknown = sorted(set(raw) - set(cls.base_fields))
        if unknown:
            raise ValidationError(f'{section}: unknown keys {", ".join(unknown)}')
        data = {name: field.initial for name, field in cls.base_fields.items()}
        data.update(raw)
        form = cls(data=data)
        if not form.is_valid():
            raise ValidationError({
                f'{section}.{name}' if name != '__all__' else section: list(errors)
                for name, errors in form.errors.items()
            })
        return form.cleaned_data


class MluForm(ConfigForm):
    cpu_freq_hz = forms.FloatField(initial=2e9, validators=[validate_positive])
    p_max_dbm = forms.FloatField(initial=33.0)
    e_max_j = forms.FloatField(initial=2.0, validators=[validate_positive])
    position = NumberListField(required=False, initial=None, min_length=2, max_length=2)


class QosForm(ConfigForm):
    catalog = forms.CharField(required=False, initial='')
    local_variant = forms.CharField(required=False, initial='llama-3.1-8b/ours')
    edge_variant = forms.CharField(required=False, initial='llama-3.1-8b/original')
    local_profile = forms.JSONField(required=False, initial=None)
    edge_profile = forms.JSONField(required=False, initial=None)
    a_min = forms.FloatField(initial=0.6, validators=[validate_unit_interval])
    h_max = forms.FloatField(initial=0.78, validators=[validate_unit_interval])
    penalty_weight = forms.FloatField(initial=10.0, validators=[validate_positive])
    mec_accuracy = forms.FloatField(initial=1.0, validators=[validate_unit_interval])
    mec_hallucination = forms.FloatField(required=False, initial=None, validators=[validate_unit_interval])
    concentration = forms.FloatField(required=False, initial=50.0, validators=[validate_positive])

    def clean(self):
        cleaned = super().clean()
        if not cleaned.get('local_variant') and not cleaned.get('local_profile'):
            raise ValidationError('either local_variant or local_profile is required')
        if not cleaned.get('edge_variant') and not cleaned.get('edge_profile'):
            raise ValidationError('either edge_variant or edge_profile is required')
        return cleaned


class SystemConfigForm(ConfigForm):
    num_mlus = forms.IntegerField(initial=2, min_value=1)
    slots = forms.IntegerField(initial=100, min_value=1)
    bandwidth_hz = forms.FloatField(initial=1e7, validators=[validate_positive])
    noise_power_dbm = forms.FloatField(initial=-104.0)
    rician_k = forms.FloatField(required=False, initial=8.0, min_value=0.0)
    ref_gain_db = forms.FloatField(initial=-30.0)
    mec_height_m = forms.FloatField(initial=10.0, min_value=0.0)
    mec_freq_hz = forms.FloatField(initial=1e10, validators=[validate_positive])
    cycles_per_bit = forms.FloatField(initial=900.0, validators=[validate_positive])
    cycles_per_bit_mec = forms.FloatField(required=False, initial=None, validators=[validate_positive])
    energy_coeff = forms.FloatField(initial=1e-28, validators=[validate_positive])
    task_size_mbit = NumberListField(initial=[1.0, 2.5], min_length=2, max_length=2, min_value=1e-9)
    cell_radius_m = forms.FloatField(initial=20.0, validators=[validate_positive])
    slot_cap_s = forms.FloatField(initial=10.0, validators=[validate_positive])
    latency_scale_s = forms.FloatField(initial=1.0, validators=[validate_positive])
    seed = forms.IntegerField(required=False, initial=0, min_value=0)
    mlu_defaults = forms.JSONField(required=False, initial=None)
    mlus = forms.JSONField(required=False, initial=None)
    qos = forms.JSONField(required=False, initial=None)

    def clean_task_size_mbit(self):
        low, high = self.cleaned_data['task_size_mbit']
        if low > high:
            raise ValidationError('task_size_mbit must be [low, high] with low <= high')
        return [low, high]

    def clean_mlus(self):
        mlus = self.cleaned_data.get('mlus') or []
        if not isinstance(mlus, list):
            raise ValidationError('mlus must be a list of per-MLU objects')
        for index, entry in enumerate(mlus):
            if entry is not None and not isinstance(entry, dict):
                raise ValidationError(f'mlus[{index}] must be a JSON object')
        return mlus

    def clean_mlu_defaults(self):
        defaults = self.cleaned_data.get('mlu_defaults')
        if defaults is not None and not isinstance(defaults, dict):
            raise ValidationError('mlu_defaults must be a JSON object')
        return defaults


class PpoConfigForm(ConfigForm):
    clip_eps = forms.FloatField(initial=0.1)
    gamma = forms.FloatField(initial=0.99)
    epochs = forms.IntegerField(initial=10, min_value=1)
    entropy_coef = forms.FloatField(initial=0.001, min_value=0.0)
    gae_lambda = forms.FloatField(initial=0.95, validators=[validate_unit_interval])
    minibatch_size = forms.IntegerField(initial=64, min_value=1)
    actor_lr = forms.FloatField(initial=1e-5, validators=[validate_positive])
    critic_lr = forms.FloatField(initial=1e-5, validators=[validate_positive])
    hidden = NumberListField(number=int, initial=[256, 256], min_length=1, min_value=1)
    normalize_advantages = forms.BooleanField(required=False, initial=True)
    max_grad_norm = forms.FloatField(required=False, initial=None, validators=[validate_positive])
    init_log_std = forms.FloatField(initial=-0.5)

    def clean_clip_eps(self):
        value = self.cleaned_data['clip_eps']
        if not 0.0 < value < 1.0:
            raise ValidationError('clip_eps must lie in (0, 1)')
        return value

    def clean_gamma(self):
        value = self.cleaned_data['gamma']
        if not 0.0 < value <= 1.0:
            raise ValidationError('gamma must lie in (0, 1]')
        return value


class WmConfigForm(ConfigForm):
    n_h = forms.IntegerField(initial=256, min_value=1)
    n_z = forms.IntegerField(initial=32, min_value=1)
    hidden = NumberListField(number=int, initial=[256, 256], min_length=1, min_value=1)
    lambda_r = forms.FloatField(initial=1.0, min_value=0.0)
    beta_kl = forms.FloatField(initial=1.0, min_value=0.0)
    lambda_d = forms.FloatField(initial=0.1, min_value=0.0)
    lambda_wm = forms.FloatField(initial=0.5, validators=[validate_unit_interval])
    horizon = forms.IntegerField(initial=3, min_value=1)
    eta = forms.FloatField(initial=0.3, min_value=0.0)
    lr = forms.FloatField(initial=1e-3, validators=[validate_positive])
    seq_len = forms.IntegerField(initial=16, min_value=1)
    batch_size = forms.IntegerField(initial=16, min_value=1)
    updates_per_iteration = forms.IntegerField(initial=10, min_value=0)
    replay_episodes = forms.IntegerField(initial=32, min_value=1)
    select_fraction = forms.FloatField(initial=0.25, validators=[validate_unit_interval])
    max_grad_norm = forms.FloatField(required=False, initial=100.0, validators=[validate_positive])


class RunConfigForm(ConfigForm):
    ALGORITHM_CHOICES = [
        ('wm-ppo', 'World-model PPO'),
        ('ppo', 'Vanilla PPO'),
        ('always-local', 'Always local'),
        ('always-offload', 'Always offload'),
    ]

    algorithm = forms.ChoiceField(choices=ALGORITHM_CHOICES, initial='wm-ppo')
    iterations = forms.IntegerField(initial=300, min_value=1)
    seeds = NumberListField(number=int, initial=[0], min_length=1, min_value=0)
    checkpoint_interval = forms.IntegerField(initial=50, min_value=1)
    eval_episodes = forms.IntegerField(initial=100, min_value=1)
    trace_episodes = forms.IntegerField(initial=1, min_value=0)
    parallel_envs = forms.IntegerField(initial=1, min_value=1)
    k_values = NumberListField(number=int, required=False, initial=[2, 3], min_value=1)
    task_size_sweep_mbit = NumberListField(required=False, initial=[], min_value=1e-9)
    system = forms.JSONField(required=False, initial=None)
    ppo = forms.JSONField(required=False, initial=None)
    world_model = forms.JSONField(required=False, initial=None)


class CompressConfigForm(ConfigForm):
    seed = forms.IntegerField(initial=0, min_value=0)
    n_in = forms.IntegerField(initial=16, min_value=1)
    n_embed = forms.IntegerField(initial=16, min_value=1)
    n_layers = forms.IntegerField(initial=2, min_value=1)
    n_heads = forms.IntegerField(initial=4, min_value=1)
    head_size = forms.IntegerField(initial=8, min_value=1)
    n_classes = forms.IntegerField(initial=4, min_value=2)
    teacher_scale = forms.FloatField(initial=2.0, validators=[validate_positive])
    n_calibration = forms.IntegerField(initial=64, min_value=1)
    n_train = forms.IntegerField(initial=512, min_value=1)
    n_test = forms.IntegerField(initial=512, min_value=1)
    theta = forms.FloatField(required=False, initial=None, min_value=0.0)
    theta_depth = forms.FloatField(required=False, initial=None, min_value=0.0)
    theta_quantile = forms.FloatField(initial=0.3, validators=[validate_unit_interval])
    distill_alpha = forms.FloatField(initial=0.5, validators=[validate_unit_interval])
    distill_tau = forms.FloatField(initial=2.0, validators=[validate_positive])
    distill_steps = forms.IntegerField(initial=300, min_value=0)
    distill_lr = forms.FloatField(initial=1e-2, validators=[validate_positive])
    bit_width = forms.IntegerField(required=False, initial=None, min_value=1, max_value=32)
    target = forms.ChoiceField(
        choices=[('smartphone', 'Smartphone'), ('laptop', 'Laptop'), ('edge-server', 'Edge server')],
        initial='smartphone',
    )
    grid = forms.IntegerField(initial=32, min_value=2)
    catalog = forms.CharField(required=False, initial='')
    base_variant = forms.CharField(initial='llama-3.1-8b/original')
    variant_name = forms.CharField(initial='toy/ecld')
    accuracy_corpus = forms.CharField(required=False, initial='')
    hallucination_corpus = forms.CharField(required=False, initial='')
