import csv

from django.http import HttpResponse
from django.shortcuts import get_object_or_404
from django.views import View
from django.views.generic import ListView, DetailView
from django.contrib.auth.mixins import LoginRequiredMixin

from .models import VariantProfile, CompressionReport, TrainingRun, IterationMetric, PolicyEvaluation


class TrainingRunListView(LoginRequiredMixin, ListView):
    model = TrainingRun
    template_name = 'offload/run_list.html'
    context_object_name = 'runs'
    paginate_by = 50

    def get_queryset(self):
        queryset = super().get_queryset()
        algorithm = self.request.GET.get('algorithm')
        if algorithm:
            queryset = queryset.filter(algorithm=algorithm)
        status = self.request.GET.get('status')
        if status:
            queryset = queryset.filter(status=status)
        return queryset

    def get_context_data(self, **kwargs):
        context = super().get_context_data(**kwargs)
        context['algorithm_choices'] = TrainingRun.ALGORITHM_CHOICES
        context['status_choices'] = TrainingRun.STATUS_CHOICES
        context['current_algorithm'] = self.request.GET.get('algorithm', '')
        context['current_status'] = self.request.GET.get('status', '')
        return context


class TrainingRunDetailView(LoginRequiredMixin, DetailView):
    model = TrainingRun
    template_name = 'offload/run_detail.html'
    context_object_name = 'run'

    def get_context_data(self, **kwargs):
        context = super().get_context_data(**kwargs)
        context['metrics'] = self.object.metrics.order_by('iteration')
        context['evaluations'] = self.object.evaluations.all()
        return context


class MetricCsvView(LoginRequiredMixin, View):
    """Per-iteration metrics of one run as a CSV download."""

    def get(self, request, pk):
        run = get_object_or_404(TrainingRun, pk=pk)
        response = HttpResponse(content_type='text/csv')
        response['Content-Disposition'] = f'attachment; filename="run_{run.pk}_metrics.csv"'
        writer = csv.writer(response)
        writer.writerow(IterationMetric.CSV_FIELDS)
        for metric in run.metrics.order_by('iteration'):
            writer.writerow([getattr(metric, name) for name in IterationMetric.CSV_FIELDS])
        return response


class VariantProfileListView(LoginRequiredMixin, ListView):
    model = VariantProfile
    template_name = 'offload/profile_list.html'
    context_object_name = 'profiles'

    def get_queryset(self):
        queryset = super().get_queryset()
        family = self.request.GET.get('family')
        if family:
            queryset = queryset.filter(family=family)
        return queryset

    def get_context_data(self, **kwargs):
        context = super().get_context_data(**kwargs)
        context['families'] = VariantProfile.objects.order_by('family').values_list('family', flat=True).distinct()
        context['current_family'] = self.request.GET.get('family', '')
        return context


class CompressionReportListView(LoginRequiredMixin, ListView):
    model = CompressionReport
    template_name = 'offload/report_list.html'
    context_object_name = 'reports'


class CompressionReportDetailView(LoginRequiredMixin, DetailView):
    model = CompressionReport
    template_name = 'offload/report_detail.html'
    context_object_name = 'report'


class PolicyEvaluationListView(LoginRequiredMixin, ListView):
    model = PolicyEvaluation
    template_name = 'offload/evaluation_list.html'
    context_object_name = 'evaluations'

    def get_queryset(self):
        queryset = super().get_queryset()
        num_mlus = self.request.GET.get('num_mlus')
        if num_mlus and num_mlus.isdigit():
            queryset = queryset.filter(num_mlus=int(num_mlus))
        return queryset
