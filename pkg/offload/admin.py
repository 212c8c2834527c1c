from django.contrib import admin
from .models import VariantProfile, CompressionReport, TrainingRun, IterationMetric, PolicyEvaluation


class IterationMetricInline(admin.TabularInline):
    model = IterationMetric
    extra = 0
    fields = ('iteration', 'reward_mean', 'latency_mean', 'accuracy_mean', 'hallucination_mean', 'actor_loss', 'critic_loss')
    readonly_fields = fields
    can_delete = False
    show_change_link = True


@admin.register(VariantProfile)
class VariantProfileAdmin(admin.ModelAdmin):
    list_display = ('name', 'family', 'method', 'offline_accuracy', 'offline_hallucination', 'storage_mb', 'energy_wh', 'source')
    list_filter = ('family', 'method', 'source')
    search_fields = ('name', 'family', 'method')
    fieldsets = (
        ('Identification', {
            'fields': ('name', 'family', 'method', 'source')
        }),
        ('Offline QoS', {
            'fields': ('offline_accuracy', 'offline_hallucination')
        }),
        ('Footprint', {
            'fields': ('storage_mb', 'energy_wh')
        }),
    )


@admin.register(CompressionReport)
class CompressionReportAdmin(admin.ModelAdmin):
    list_display = ('created_at', 'target', 'bit_width', 'theta', 'storage_ratio', 'profile', 'config_hash')
    list_filter = ('target', 'bit_width')
    search_fields = ('config_hash', 'profile__name')
    readonly_fields = ('created_at',)


@admin.register(TrainingRun)
class TrainingRunAdmin(admin.ModelAdmin):
    list_display = ('algorithm', 'seed', 'num_mlus', 'status', 'iterations_completed', 'convergence_iteration', 'created_at')
    list_filter = ('algorithm', 'status', 'num_mlus')
    search_fields = ('config_hash', 'output_dir')
    fieldsets = (
        (None, {
            'fields': ('algorithm', 'seed', 'num_mlus', 'status')
        }),
        ('Progress', {
            'fields': ('iterations_completed', 'convergence_iteration', 'error')
        }),
        ('Provenance', {
            'fields': ('config_hash', 'output_dir', 'config')
        }),
    )
    inlines = [IterationMetricInline]


@admin.register(IterationMetric)
class IterationMetricAdmin(admin.ModelAdmin):
    list_display = ('run', 'iteration', 'reward_mean', 'latency_mean', 'accuracy_mean', 'hallucination_mean')
    list_filter = ('run__algorithm',)
    search_fields = ('run__config_hash',)


@admin.register(PolicyEvaluation)
class PolicyEvaluationAdmin(admin.ModelAdmin):
    list_display = ('policy', 'num_mlus', 'seed', 'latency_mean', 'accuracy_mean', 'hallucination_mean', 'accuracy_satisfaction')
    list_filter = ('policy', 'num_mlus')
    search_fields = ('config_hash',)
