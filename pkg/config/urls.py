from django.urls import path, include

"""
NMP TILE SERVICE - URL REFERENCE

POST /api/nmp/tiles/exchange/
  Body: one binary tile-protocol frame (content type application/x-nmp-frame)
  Ops:  0x01 GET_TILES, 0x02 PUT_TILE, 0x03 STATS
  Reply: one binary frame; status 0x00 OK, 0x01 EMPTY, 0x02 STALE_MERGED,
         0x10 MALFORMED (HTTP 400)

GET /api/nmp/health/
  Liveness check.
"""

urlpatterns = [
    path("", include("apps.tile_service.urls")),
]
