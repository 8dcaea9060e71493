from django.urls import path

from .views import Health, TileExchange

urlpatterns = [
    path("api/nmp/tiles/exchange/", TileExchange.as_view()),
    path("api/nmp/health/", Health.as_view()),
]
