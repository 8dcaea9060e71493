from django.http import HttpResponse
from rest_framework import status
from rest_framework.parsers import BaseParser
from rest_framework.response import Response
from rest_framework.views import APIView

from .protocol import FRAME_CONTENT_TYPE
from .service import get_tile_store, handle_frame

# set by the embedded server so several stores can be served from one process
STORE_ENVIRON_KEY = "nmp.tile_store"


class FrameParser(BaseParser):
    media_type = FRAME_CONTENT_TYPE

    def parse(self, stream, media_type=None, parser_context=None):
        return stream.read()


class TileExchange(APIView):
    """
    POST /api/nmp/tiles/exchange/
    Body: one request frame. Reply: one response frame.
    """

    authentication_classes = []
    permission_classes = []
    parser_classes = [FrameParser]

    def post(self, request):
        data = request.data if isinstance(request.data, (bytes, bytearray)) else b""
        store = request.META.get(STORE_ENVIRON_KEY) or get_tile_store()
        body, http_status = handle_frame(store, bytes(data))
        return HttpResponse(body, content_type=FRAME_CONTENT_TYPE, status=http_status)


class Health(APIView):
    """
    GET /api/nmp/health/
    """

    authentication_classes = []
    permission_classes = []

    def get(self, request):
        store = request.META.get(STORE_ENVIRON_KEY) or get_tile_store()
        return Response({"status": "ok", "tiles": len(store.keys())}, status=status.HTTP_200_OK)
