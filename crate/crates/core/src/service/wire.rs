//! Newline-delimited JSON protocol.
//!
//! One request object per line, one response object per line. A connection
//! holds at most one session: `login` binds it, later requests run as that
//! user. Unknown fields are ignored and a line that does not parse yields a
//! single `bad_request` response without closing the connection.

use serde::{Deserialize, Serialize};

use super::{NearbyEntry, Service, ServiceError, SessionId};
use crate::geo::GeoPoint;
use crate::world::UserId;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum Request {
    Login { token: String },
    Nearby { radius_m: f64 },
    UpdateLocation { lat: f64, lon: f64 },
    Profile { user_id: UserId },
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Response {
    pub ok: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub user_id: Option<UserId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub t_s: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub users: Option<Vec<NearbyEntry>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub user: Option<NearbyEntry>,
}

impl Response {
    pub fn error(e: &ServiceError) -> Self {
        Self {
            ok: false,
            error: Some(e.code().to_string()),
            ..Default::default()
        }
    }

    fn ok() -> Self {
        Self {
            ok: true,
            ..Default::default()
        }
    }

    /// Turn an error response back into the matching [`ServiceError`].
    pub fn into_result(self) -> Result<Self, ServiceError> {
        if self.ok {
            Ok(self)
        } else {
            Err(ServiceError::from_code(self.error.as_deref().unwrap_or("bad_request")))
        }
    }
}

/// Per-connection protocol state.
#[derive(Debug, Default)]
pub struct Connection {
    session: Option<SessionId>,
}

impl Connection {
    pub fn new() -> Self {
        Self::default()
    }

    /// Answer one request line. The returned string has no trailing newline.
    pub fn handle_line(&mut self, service: &mut Service, line: &str) -> String {
        let resp = match serde_json::from_str::<Request>(line) {
            Ok(req) => self.dispatch(service, req).unwrap_or_else(|e| Response::error(&e)),
            Err(e) => Response::error(&ServiceError::BadRequest(e.to_string())),
        };
        serde_json::to_string(&resp).expect("response serializes")
    }

    pub fn dispatch(&mut self, service: &mut Service, req: Request) -> Result<Response, ServiceError> {
        if let Request::Login { token } = &req {
            let session = service.login(token)?;
            self.session = Some(session);
            return Ok(Response {
                user_id: Some(service.session_user(session)?),
                ..Response::ok()
            });
        }
        let session = self.session.ok_or(ServiceError::Auth)?;
        Ok(match req {
            Request::Login { .. } => unreachable!(),
            Request::Nearby { radius_m } => Response {
                users: Some(service.nearby(session, radius_m)?),
                ..Response::ok()
            },
            Request::UpdateLocation { lat, lon } => {
                let p = GeoPoint::new(lat, lon).map_err(|e| ServiceError::BadRequest(e.to_string()))?;
                Response {
                    t_s: Some(service.update_location(session, p)?.t_s),
                    ..Response::ok()
                }
            }
            Request::Profile { user_id } => Response {
                user: Some(service.profile(session, user_id)?),
                ..Response::ok()
            },
        })
    }
}
