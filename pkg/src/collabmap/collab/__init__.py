from .messages import (
    EndOfStream,
    FrameSubmission,
    KeyframeSubmission,
    PoseUpdate,
    Tag,
    decode,
    encode,
    iter_messages,
)
from .server import MergeEvent, OtfServer, ServerConfig, SubMap
from .transport import Channel, Transport, frame_messages, replay
from .slam import SlamServer
