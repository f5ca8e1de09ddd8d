"""Wire format, transports and party roles.

The experiment driver lives in :mod:`maser.protocol.experiment` and is not
imported here, since it depends on the configuration module.
"""

from .messages import Kind, Message, decode_frame, encode_frame, read_frame
from .roles import Client, KeyManager, Phase, RoundRecord, RoundState, Server, malicious_mask
from .transport import Hub, SimChannel, TcpChannel, TcpHubServer, TrafficLedger

__all__ = [
    "Client",
    "Hub",
    "KeyManager",
    "Kind",
    "Message",
    "Phase",
    "RoundRecord",
    "RoundState",
    "Server",
    "SimChannel",
    "TcpChannel",
    "TcpHubServer",
    "TrafficLedger",
    "decode_frame",
    "encode_frame",
    "malicious_mask",
    "read_frame",
]
