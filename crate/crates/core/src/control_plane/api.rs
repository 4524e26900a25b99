use std::collections::{BTreeSet, HashMap};
use std::sync::Arc;

use parking_lot::Mutex;
use serde_json::json;

use super::{ControlError, ControlPlane};
use crate::auth::{extract_oidc_headers, KeyCache, KeyProvider, Verifier};
use crate::clock::Clock;
use crate::gateway::{Gateway, GatewayError, ListenerRule, RuleAction, TargetGroupSpec};
use crate::net::{json_response, query_param, redirect, response, HttpHandler, HttpRequest, HttpResponse, TargetAddr};

pub const HUB_TARGET_GROUP: &str = "hub";
const HUB_LOGIN_PATH: &str = "/hub/login";

/// The hub's HTTP surface. It sits behind the gateway and trusts only
/// identity headers it can verify itself.
pub struct HubApi {
    plane: Arc<ControlPlane>,
    verifier: Verifier,
    provider: Arc<dyn KeyProvider>,
    clock: Arc<dyn Clock>,
    caches: Mutex<HashMap<String, KeyCache>>,
}

impl HubApi {
    pub fn new(
        plane: Arc<ControlPlane>,
        verifier: Verifier,
        provider: Arc<dyn KeyProvider>,
        clock: Arc<dyn Clock>,
    ) -> Self {
        Self {
            plane,
            verifier,
            provider,
            clock,
            caches: Mutex::new(HashMap::new()),
        }
    }

    /// Adds the hub's target group and its three rules: the API and the
    /// login entry require a session, the root page does not.
    pub fn install_routes(gateway: &Gateway, addr: TargetAddr) -> Result<(), GatewayError> {
        gateway.add_target_group(TargetGroupSpec {
            id: HUB_TARGET_GROUP.into(),
            health_check_path: "/".into(),
            expected_status: BTreeSet::from([200]),
        })?;
        gateway.register_target(HUB_TARGET_GROUP, addr)?;
        let auth = RuleAction::AuthenticateThenForward(HUB_TARGET_GROUP.into());
        gateway.add_rule(ListenerRule::new(1, "/api/*", auth.clone()))?;
        gateway.add_rule(ListenerRule::new(2, HUB_LOGIN_PATH, auth))?;
        gateway.add_rule(ListenerRule::new(
            3,
            "/",
            RuleAction::PublicForward(HUB_TARGET_GROUP.into()),
        ))?;
        Ok(())
    }

    fn identity(&self, req: &HttpRequest) -> Option<String> {
        let headers = extract_oidc_headers(req.headers());
        let user = headers.identity.clone()?;
        let mut caches = self.caches.lock();
        let cache = caches.entry(user).or_default();
        self.verifier
            .verify_jwt(&headers, cache, self.provider.as_ref(), self.clock.now())
            .ok()
            .map(|id| id.oidc_id)
    }

    fn error(e: &ControlError) -> HttpResponse {
        json_response(e.http_status(), &json!({ "error": e.code(), "detail": e.to_string() }))
    }

    fn api(&self, req: &HttpRequest, verified: &str, rest: &str) -> HttpResponse {
        let user = query_param(req, "user").unwrap_or_else(|| verified.to_string());
        let method = req.method().as_str();
        let (action, app) = rest.split_once('/').unwrap_or((rest, ""));
        let result = match (method, action) {
            ("GET", "workspaces") if app.is_empty() => {
                if user != verified {
                    Err(ControlError::IdentityMismatch {
                        requested: user,
                        verified: verified.into(),
                    })
                } else {
                    Ok(json!({ "user": verified, "workspaces": self.plane.workspaces(verified) }))
                }
            }
            ("POST", "connect") if !app.is_empty() => self
                .plane
                .connect(&user, app, verified)
                .map(|o| serde_json::to_value(o).unwrap_or_default()),
            ("GET", "poll") if !app.is_empty() => {
                if user != verified {
                    Err(ControlError::IdentityMismatch {
                        requested: user,
                        verified: verified.into(),
                    })
                } else {
                    self.plane
                        .status(verified, app)
                        .map(|s| serde_json::to_value(s).unwrap_or_default())
                }
            }
            ("POST", "decommission") if !app.is_empty() => self
                .plane
                .decommission(&user, app, verified)
                .map(|()| json!({ "status": "decommissioned", "app": app })),
            (_, "workspaces" | "connect" | "poll" | "decommission") => {
                return json_response(405, &json!({ "error": "method_not_allowed" }));
            }
            _ => return json_response(404, &json!({ "error": "not_found" })),
        };
        match result {
            Ok(body) => json_response(200, &body),
            Err(e) => Self::error(&e),
        }
    }
}

fn login_page() -> String {
    format!(
        "<!doctype html><html><body><h1>Workbench</h1>\
         <form method=\"get\" action=\"{HUB_LOGIN_PATH}\"><button type=\"submit\">Sign in</button></form>\
         </body></html>"
    )
}

impl HttpHandler for HubApi {
    fn handle(&self, req: HttpRequest) -> HttpResponse {
        let path = req.uri().path().to_string();
        let identity = self.identity(&req);
        if let Some(rest) = path.strip_prefix("/api/") {
            return match identity {
                Some(user) => self.api(&req, &user, rest),
                None => json_response(401, &json!({ "error": "unauthenticated" })),
            };
        }
        match path.as_str() {
            "/" => match identity {
                Some(user) => json_response(
                    200,
                    &json!({ "user": user, "workspaces": self.plane.workspaces(&user) }),
                ),
                None => response(200, "text/html; charset=utf-8", login_page()),
            },
            HUB_LOGIN_PATH => match identity {
                Some(_) => redirect(302, "/"),
                None => response(401, "text/plain; charset=utf-8", "unauthenticated\n"),
            },
            _ => response(404, "text/plain; charset=utf-8", "not found\n"),
        }
    }
}
