//! JSON-RPC 2.0 framing, one message per line, over stdio or a unix socket.
//! The only place that knows about the wire.

use std::io::{BufRead, BufReader, Write};
use std::os::unix::net::{UnixListener, UnixStream};
use std::path::Path;

use serde_json::{json, Value};

use super::schema::tool_specs;
use super::{McpError, McpService, INVALID_PARAMS, UNKNOWN_FUNCTION};

pub const PROTOCOL_VERSION: &str = "2024-11-05";
const PARSE_ERROR: i64 = -32700;
const INVALID_REQUEST: i64 = -32600;

fn error_response(id: Value, code: i64, message: String, data: Option<Value>) -> Value {
    let mut error = json!({"code": code, "message": message});
    if let Some(data) = data {
        error["data"] = data;
    }
    json!({"jsonrpc": "2.0", "id": id, "error": error})
}

fn tools_list() -> Value {
    let tools: Vec<Value> = tool_specs()
        .into_iter()
        .map(|t| {
            json!({
                "name": t.name,
                "description": t.description,
                "inputSchema": t.input_schema,
                "outputSchema": t.output_schema,
            })
        })
        .collect();
    json!({"tools": tools})
}

fn call(service: &McpService, params: &Value) -> Result<Value, McpError> {
    let name =
        params
            .get("name")
            .and_then(Value::as_str)
            .ok_or_else(|| McpError::SchemaViolation {
                function: "tools/call".into(),
                failures: vec![crate::llm::FieldFailure {
                    path: "$.name".into(),
                    message: "missing tool name".into(),
                }],
            })?;
    let args = params
        .get("arguments")
        .cloned()
        .unwrap_or_else(|| json!({}));
    let result = service.dispatch(name, &args)?;
    Ok(json!({
        "content": [{"type": "text", "text": result.to_string()}],
        "structuredContent": result,
        "isError": false,
    }))
}

/// Answers one line. Notifications get no answer.
pub fn handle_message(service: &McpService, line: &str) -> Option<String> {
    let message: Value = match serde_json::from_str(line) {
        Ok(v) => v,
        Err(e) => {
            return Some(
                error_response(Value::Null, PARSE_ERROR, format!("parse error: {e}"), None)
                    .to_string(),
            )
        }
    };
    let Some(method) = message.get("method").and_then(Value::as_str) else {
        let id = message.get("id").cloned().unwrap_or(Value::Null);
        return Some(
            error_response(id, INVALID_REQUEST, "not a JSON-RPC request".into(), None).to_string(),
        );
    };
    let id = message.get("id").cloned()?;
    let params = message.get("params").cloned().unwrap_or_else(|| json!({}));
    let result = match method {
        "initialize" => Ok(json!({
            "protocolVersion": PROTOCOL_VERSION,
            "capabilities": {"tools": {"listChanged": false}},
            "serverInfo": {"name": "foamflow", "version": env!("CARGO_PKG_VERSION")},
        })),
        "ping" => Ok(json!({})),
        "tools/list" => Ok(tools_list()),
        "tools/call" => call(service, &params),
        other => Err(McpError::UnknownFunction(other.to_string())),
    };
    let response = match result {
        Ok(result) => json!({"jsonrpc": "2.0", "id": id, "result": result}),
        Err(e) => {
            let code = e.code();
            debug_assert!(code != INVALID_PARAMS || matches!(e, McpError::SchemaViolation { .. }));
            debug_assert!(code != UNKNOWN_FUNCTION || matches!(e, McpError::UnknownFunction(_)));
            error_response(id, code, e.to_string(), e.data())
        }
    };
    Some(response.to_string())
}

fn serve_lines(
    service: &McpService,
    input: impl BufRead,
    mut output: impl Write,
) -> std::io::Result<()> {
    for line in input.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        if let Some(reply) = handle_message(service, &line) {
            writeln!(output, "{reply}")?;
            output.flush()?;
        }
    }
    Ok(())
}

/// Serves stdin until it closes.
pub fn serve_stdio(service: &McpService) -> std::io::Result<()> {
    let stdin = std::io::stdin();
    serve_lines(service, stdin.lock(), std::io::stdout().lock())
}

/// Binds the socket, replacing a stale file but never a live server.
pub fn bind_socket(path: &Path) -> Result<UnixListener, McpError> {
    let io = |e| McpError::Io {
        path: path.to_path_buf(),
        source: e,
    };
    match UnixListener::bind(path) {
        Ok(listener) => Ok(listener),
        Err(e) if e.kind() == std::io::ErrorKind::AddrInUse => {
            if UnixStream::connect(path).is_ok() {
                return Err(McpError::AddressInUse(path.to_path_buf()));
            }
            std::fs::remove_file(path).map_err(io)?;
            UnixListener::bind(path).map_err(io)
        }
        Err(e) => Err(io(e)),
    }
}

/// Serves every connection on its own thread, forever.
pub fn serve_socket(service: &McpService, listener: UnixListener) -> std::io::Result<()> {
    std::thread::scope(|scope| {
        for stream in listener.incoming() {
            let stream = stream?;
            scope.spawn(move || {
                let reader = match stream.try_clone() {
                    Ok(r) => BufReader::new(r),
                    Err(e) => return log::warn!("dropping connection: {e}"),
                };
                if let Err(e) = serve_lines(service, reader, &stream) {
                    log::warn!("connection closed with error: {e}");
                }
            });
        }
        Ok(())
    })
}
