from django.urls import path
from . import views

urlpatterns = [
    # Training run URLs
    path('runs/', views.TrainingRunListView.as_view(), name='run-list'),
    path('runs/<int:pk>/', views.TrainingRunDetailView.as_view(), name='run-detail'),
    path('runs/<int:pk>/metrics.csv', views.MetricCsvView.as_view(), name='run-metrics-csv'),

    # Profile URLs
    path('profiles/', views.VariantProfileListView.as_view(), name='profile-list'),

    # Compression report URLs
    path('reports/', views.CompressionReportListView.as_view(), name='report-list'),
    path('reports/<int:pk>/', views.CompressionReportDetailView.as_view(), name='report-detail'),

    # Evaluation URLs
    path('evaluations/', views.PolicyEvaluationListView.as_view(), name='evaluation-list'),
]
