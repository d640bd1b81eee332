"""In-memory persistence for agent platforms by worker/clone mirroring."""

from .errors import *  # noqa: F401,F403
from .ids import AgentId, PlatformAddress
from .state import (
    DELETE,
    EnvState,
    LocalState,
    StateUpdate,
    apply_update,
    decode_snapshot,
    decode_update,
    diff_states,
    encode_snapshot,
    encode_update,
)
from .transport import (
    Delay,
    DropNext,
    DropRate,
    Envelope,
    Inbox,
    InProcessNetwork,
    MessageType,
    Repair,
    Sever,
    SocketEndpoint,
    decode_envelope,
    encode_envelope,
    inject_fault,
    recv,
    send,
)
from .loop import RealLoop, SimLoop
from .agent import Behavior
from .mirror import (
    CloneBinding,
    FailureEvent,
    MirrorStrategy,
    detect_failure,
    handover,
    recreate_clone,
    recreate_worker,
    request_clone,
    resync,
    sync_update,
)
from .runtime import (
    AgentRecord,
    MonitorConfig,
    Platform,
    PlatformConfig,
    exchange_aids,
    kill_agent,
    launch_platform,
    load_platform_config,
    parse_platform_config,
    spawn_agent,
    update_env,
)
from .store import StateStore, StoreStrategy, fetch_state, persist_state, recreate_from_store
from .auction import AuctionConfig, AuctionResult, make_crash_schedule, run_auction

__version__ = "0.1.0"
