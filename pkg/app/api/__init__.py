# API package initialization