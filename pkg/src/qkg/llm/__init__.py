from qkg.llm.gateway import (
    ChatExchange,
    Gateway,
    GatewayError,
    HttpBackend,
    MockBackend,
    RoleConfig,
    TransientError,
    build_gateway,
    fingerprint,
    load_config,
)
from qkg.llm.prompts import render_prompt
from qkg.llm.schema import (
    QAResponse,
    ResponseParseError,
    ResponseValidationError,
    extract_json_object,
    parse_qa_response,
)

__all__ = [
    "ChatExchange", "Gateway", "GatewayError", "HttpBackend", "MockBackend", "RoleConfig",
    "TransientError", "build_gateway", "fingerprint", "load_config", "render_prompt",
    "QAResponse", "ResponseParseError", "ResponseValidationError", "extract_json_object",
    "parse_qa_response",
]
