from django.views.generic import TemplateView
from django.contrib.auth.mixins import LoginRequiredMixin

from offload.models import CompressionReport, PolicyEvaluation, TrainingRun, VariantProfile


class HomeView(LoginRequiredMixin, TemplateView):
    template_name = 'home.html'

    def get_context_data(self, **kwargs):
        context = super().get_context_data(**kwargs)
        context['page_app'] = 'edgeflock'
        context['page_name'] = 'home'
        context['page_action'] = 'view'
        context['run_count'] = TrainingRun.objects.count()
        context['completed_count'] = TrainingRun.objects.filter(status='COMPLETED').count()
        context['profile_count'] = VariantProfile.objects.count()
        context['report_count'] = CompressionReport.objects.count()
        context['evaluation_count'] = PolicyEvaluation.objects.count()
        context['recent_runs'] = TrainingRun.objects.order_by('-created_at')[:5]
        return context
