#!/usr/bin/env python3
"""
Local OpenAI-compatible chat-completions stub.

Answers negative-filling prompts from the candidate lists they carry, so forging can
run offline and the client's retry and fallback branches can be exercised.

Modes:
    first          pick the first candidate of every slot
    out_of_subset  answer with a word that is never offered
    throttle       reply 429 to the first `throttle_count` requests, then behave like `first`
    unauthorized   reply 401 to everything
"""

import logging
import os
import re
import uuid
from typing import Any, Dict, List, Optional

import uvicorn
from fastapi import FastAPI, HTTPException
from pydantic import BaseModel, Field

logger = logging.getLogger(__name__)

PORT = int(os.getenv("STUB_PORT", "5050"))
HOST = os.getenv("STUB_HOST", "127.0.0.1")
MODES = ("first", "out_of_subset", "throttle", "unauthorized")

_SLOT_RE = re.compile(r"^MASK(\d+) \((\w+)\): (.*)$")
OUT_OF_SUBSET_WORD = "zzqx"


class ChatMessage(BaseModel):
    role: str
    content: str


class ChatCompletionRequest(BaseModel):
    model: str = "stub"
    messages: List[ChatMessage] = Field(..., min_length=1)
    temperature: Optional[float] = None


def candidate_slots(prompt: str) -> List[List[str]]:
    slots = []
    for line in prompt.splitlines():
        match = _SLOT_RE.match(line.strip())
        if match:
            slots.append([word.strip() for word in match.group(3).split(",") if word.strip()])
    return slots


def create_app(mode: str = "first", throttle_count: int = 2) -> FastAPI:
    """Factory for the stub service; state (request counter) lives on app.state."""
    if mode not in MODES:
        raise ValueError(f"Unknown stub mode {mode!r}; expected one of {MODES}")

    app = FastAPI(
        title="negrank chat stub",
        description="Deterministic chat-completions endpoint for offline negative filling",
        version="1.0.0",
    )
    app.state.mode = mode
    app.state.requests = 0

    @app.get("/", summary="Health Check")
    async def root():
        return {"status": "ok", "mode": app.state.mode, "requests": app.state.requests}

    @app.post("/v1/chat/completions", summary="Chat Completions")
    async def chat_completions(request: ChatCompletionRequest) -> Dict[str, Any]:
        app.state.requests += 1
        if app.state.mode == "unauthorized":
            raise HTTPException(status_code=401, detail="invalid api key")
        if app.state.mode == "throttle" and app.state.requests <= throttle_count:
            raise HTTPException(status_code=429, detail="rate limited")

        slots = candidate_slots(request.messages[-1].content)
        if app.state.mode == "out_of_subset":
            words = [OUT_OF_SUBSET_WORD] * len(slots)
        else:
            words = [candidates[0] if candidates else OUT_OF_SUBSET_WORD for candidates in slots]
        logger.debug(f"Stub answering {len(slots)} slots in mode {app.state.mode}")
        return {
            "id": f"chatcmpl-{uuid.uuid4().hex[:12]}",
            "object": "chat.completion",
            "model": request.model,
            "choices": [{
                "index": 0,
                "message": {"role": "assistant", "content": "ANSWER: " + " | ".join(words)},
                "finish_reason": "stop",
            }],
        }

    return app


if __name__ == "__main__":
    logging.basicConfig(
        level=logging.INFO,
        format='%(asctime)s - %(name)s - %(levelname)s - %(message)s'
    )
    stub_mode = os.getenv("STUB_MODE", "first")
    print("🤖 Starting negrank chat stub...")
    print(f"📍 Endpoint: http://{HOST}:{PORT}/v1/chat/completions")
    print(f"🧪 Mode: {stub_mode}")
    uvicorn.run(create_app(stub_mode), host=HOST, port=PORT, log_level="info")
