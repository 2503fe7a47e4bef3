from slowapi import Limiter
from slowapi.util import get_remote_address

# Shared by the app factory and the rate-limited solver routes
limiter = Limiter(key_func=get_remote_address)
