from django.db import models


class VariantProfile(models.Model):
    """Model representing one compressed or reference LLM variant"""
    SOURCE_CHOICES = [
        ('TABLE', 'Published profile'),
        ('COMPRESSION', 'Compression run'),
    ]

    name = models.CharField(max_length=100, unique=True)
    family = models.CharField(max_length=50, blank=True)
    method = models.CharField(max_length=50, blank=True)
    source = models.CharField(max_length=20, choices=SOURCE_CHOICES, default='TABLE')

    # Offline QoS
    offline_accuracy = models.FloatField(help_text="Fraction of answers containing the reference")
    offline_hallucination = models.FloatField(help_text="Fraction of non-factual sentences")

    # Footprint
    storage_mb = models.FloatField(help_text="Model storage in MB")
    energy_wh = models.FloatField(help_text="Energy per inference task in Wh")

    created_at = models.DateTimeField(auto_now_add=True)
    updated_at = models.DateTimeField(auto_now=True)

    class Meta:
        ordering = ['family', 'name']

    def __str__(self):
        return self.name

    @classmethod
    def sync(cls, profile, source='TABLE'):
        """Create or refresh the row for an ecld.VariantProfile."""
        row, _ = cls.objects.update_or_create(
            name=profile.name,
            defaults={
                'family': profile.family,
                'method': profile.method,
                'source': source,
                'offline_accuracy': profile.offline_accuracy,
                'offline_hallucination': profile.offline_hallucination,
                'storage_mb': profile.storage_mb,
                'energy_wh': profile.energy_wh,
            },
        )
        return row


class CompressionReport(models.Model):
    """Model representing the output of one compress run"""
    profile = models.ForeignKey(VariantProfile, on_delete=models.SET_NULL, null=True, blank=True, related_name='reports')
    config_hash = models.CharField(max_length=64)
    seed = models.PositiveIntegerField(default=0)
    target = models.CharField(max_length=20)
    bit_width = models.PositiveSmallIntegerField()
    theta = models.FloatField()
    storage_ratio = models.FloatField(help_text="Stored bits over the unpruned 64-bit baseline")
    output_dir = models.CharField(max_length=500)
    report = models.JSONField(default=dict)
    created_at = models.DateTimeField(auto_now_add=True)

    class Meta:
        ordering = ['-created_at']

    def __str__(self):
        return f"{self.target} q={self.bit_width} ({self.config_hash})"

    @property
    def stages(self):
        return self.report.get('stages', [])


class TrainingRun(models.Model):
    """Model representing one learner trained on one seed"""
    ALGORITHM_CHOICES = [
        ('wm-ppo', 'World-model PPO'),
        ('ppo', 'Vanilla PPO'),
    ]

    STATUS_CHOICES = [
        ('RUNNING', 'Running'),
        ('COMPLETED', 'Completed'),
        ('FAILED', 'Failed'),
    ]

    algorithm = models.CharField(max_length=20, choices=ALGORITHM_CHOICES)
    seed = models.PositiveIntegerField()
    num_mlus = models.PositiveSmallIntegerField()
    config = models.JSONField(default=dict)
    config_hash = models.CharField(max_length=64)
    output_dir = models.CharField(max_length=500)
    status = models.CharField(max_length=20, choices=STATUS_CHOICES, default='RUNNING')
    iterations_completed = models.PositiveIntegerField(default=0)
    convergence_iteration = models.PositiveIntegerField(null=True, blank=True)
    error = models.TextField(blank=True)
    created_at = models.DateTimeField(auto_now_add=True)
    updated_at = models.DateTimeField(auto_now=True)

    class Meta:
        ordering = ['-created_at']

    def __str__(self):
        return f"{self.algorithm} seed {self.seed} ({self.config_hash})"

    @property
    def final_metric(self):
        return self.metrics.order_by('-iteration').first()


class IterationMetric(models.Model):
    """Model representing the metrics of one training iteration"""
    run = models.ForeignKey(TrainingRun, on_delete=models.CASCADE, related_name='metrics')
    iteration = models.PositiveIntegerField()

    # Episode outcome
    reward_mean = models.FloatField()
    latency_mean = models.FloatField()
    accuracy_mean = models.FloatField()
    hallucination_mean = models.FloatField()
    energy_mean = models.FloatField()
    omega_mean = models.FloatField(default=0.0)

    # Losses
    actor_loss = models.FloatField(null=True, blank=True)
    critic_loss = models.FloatField(null=True, blank=True)
    wm_loss = models.FloatField(null=True, blank=True)
    clip_fraction = models.FloatField(null=True, blank=True)
    approx_kl = models.FloatField(null=True, blank=True)

    extra = models.JSONField(default=dict, blank=True)

    CSV_FIELDS = [
        'iteration', 'reward_mean', 'latency_mean', 'accuracy_mean', 'hallucination_mean',
        'energy_mean', 'omega_mean', 'actor_loss', 'critic_loss', 'wm_loss', 'clip_fraction', 'approx_kl',
    ]

    class Meta:
        ordering = ['run', 'iteration']
        constraints = [
            models.UniqueConstraint(fields=['run', 'iteration'], name='unique_run_iteration'),
        ]

    def __str__(self):
        return f"{self.run} #{self.iteration}"

    @classmethod
    def from_row(cls, run, row):
        columns = {name: row.get(name) for name in cls.CSV_FIELDS if name != 'iteration'}
        extra = {key: value for key, value in row.items() if key not in cls.CSV_FIELDS}
        return cls(run=run, iteration=row['iteration'], extra=extra, **columns)


class PolicyEvaluation(models.Model):
    """Model representing an evaluation of one policy on one seed"""
    POLICY_CHOICES = [
        ('wm-ppo', 'World-model PPO'),
        ('ppo', 'Vanilla PPO'),
        ('always-local', 'Always local'),
        ('always-offload', 'Always offload'),
    ]

    run = models.ForeignKey(TrainingRun, on_delete=models.SET_NULL, null=True, blank=True, related_name='evaluations')
    policy = models.CharField(max_length=20, choices=POLICY_CHOICES)
    seed = models.PositiveIntegerField()
    num_mlus = models.PositiveSmallIntegerField()
    config_hash = models.CharField(max_length=64)
    episodes = models.PositiveIntegerField()

    latency_mean = models.FloatField()
    reward_mean = models.FloatField()
    accuracy_mean = models.FloatField()
    hallucination_mean = models.FloatField()
    energy_mean = models.FloatField()
    accuracy_satisfaction = models.FloatField()
    hallucination_satisfaction = models.FloatField()
    created_at = models.DateTimeField(auto_now_add=True)

    class Meta:
        ordering = ['num_mlus', 'policy', 'seed']

    def __str__(self):
        return f"{self.policy} K={self.num_mlus} seed {self.seed}"

    @classmethod
    def record(cls, policy, seed, num_mlus, config_hash, report, run=None):
        return cls.objects.create(
            run=run,
            policy=policy,
            seed=seed,
            num_mlus=num_mlus,
            config_hash=config_hash,
            episodes=report['episodes'],
            latency_mean=report['latency_mean'],
            reward_mean=report['reward_mean'],
            accuracy_mean=report['accuracy_mean'],
            hallucination_mean=report['hallucination_mean'],
            energy_mean=report['energy_mean'],
            accuracy_satisfaction=report['accuracy_satisfaction'],
            hallucination_satisfaction=report['hallucination_satisfaction'],
        )
